from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rsdehom.errors import BadSpec, NonElliptic
from rsdehom.medium import (SAFETY, FieldSpec, Mode, build_field, evaluate, identity_spec, layered_spec,
                            load_spec, save_spec, sqrtm_spd, tangential_mean, torus_mean)

unit = st.floats(0.0, 1.0, allow_nan=False, exclude_max=True)
coord = st.floats(-5.0, 5.0, allow_nan=False)
point2 = st.tuples(coord, coord)
omega2 = st.tuples(unit, unit)


def test_identity_field_is_constant(identity):
    c = evaluate(identity, [0.3, 0.7], [1.2, -4.0])
    assert np.array_equal(c.a, np.eye(2))
    assert np.array_equal(c.sigma, np.eye(2))
    assert np.array_equal(c.b, np.zeros(2))
    assert np.array_equal(c.gamma, [1.0, 0.0])
    assert identity.Lambda == pytest.approx(SAFETY)


def test_layered_certificate(layered):
    # a_22 in [1, 3], a_11 = 1: min(lo, 1/hi) = 1/3
    assert layered.eig_min == pytest.approx(1.0, abs=1e-12)
    assert layered.eig_max == pytest.approx(3.0, abs=1e-12)
    assert layered.Lambda == pytest.approx(SAFETY / 3.0)


def test_layered_at_zero_phase(layered):
    c = evaluate(layered, [0.0, 0.0], [0.0, 0.0])
    assert np.allclose(c.a, np.diag([1.0, 3.0]), atol=1e-15)
    assert np.allclose(c.b, [0.0, 0.0], atol=1e-14)
    assert np.array_equal(c.gamma, [1.0, 0.0])


def test_layered_at_quarter(layered):
    c = evaluate(layered, [0.0, 0.25], [0.0, 0.0])
    assert np.allclose(c.a, np.diag([1.0, 2.0]), atol=1e-15)
    assert np.allclose(c.b, [0.0, -np.pi], atol=1e-14)
    assert np.array_equal(c.gamma, [1.0, 0.0])


def test_bad_specs():
    amp = np.array([[0.5, 0.0], [0.0, 1.0]])
    with pytest.raises(BadSpec):
        build_field(FieldSpec(2, np.diag([1.0, 2.0]), (Mode((0, 1), amp),)))
    with pytest.raises(BadSpec):
        build_field(FieldSpec(2, np.diag([1.0, 2.0]), (Mode((0, 1), np.array([[0, 1.0], [0, 0]])),)))
    with pytest.raises(BadSpec):
        build_field(FieldSpec(2, np.diag([2.0, 2.0])))
    with pytest.raises(BadSpec):
        build_field(FieldSpec(2, np.eye(2), family="quasi-periodic"))


def test_non_elliptic():
    amp = np.array([[0.0, 0.0], [0.0, 3.0]])
    with pytest.raises(NonElliptic):
        build_field(FieldSpec(2, np.diag([1.0, 2.0]), (Mode((0, 1), amp),)))


def test_spec_roundtrip(tmp_path, sheared):
    save_spec(sheared.spec, tmp_path / "f.yaml")
    back = load_spec(tmp_path / "f.yaml")
    assert back.digest() == sheared.spec.digest()


def test_torus_means(layered):
    assert torus_mean(lambda w: 3 + np.cos(2 * np.pi * w[:, 0]), 16, 2) == pytest.approx(3.0, abs=1e-14)
    prod = torus_mean(lambda w: np.cos(2 * np.pi * w[:, 0]) * np.cos(2 * np.pi * w[:, 1]), 16, 2)
    assert prod == pytest.approx(0.0, abs=1e-14)
    assert torus_mean(lambda w: layered.a_at(w)[:, 1, 1], 16, 2) == pytest.approx(2.0, abs=1e-14)


def test_tangential_means():
    w1 = np.array([0.0, 0.1, 0.35])
    c1 = tangential_mean(lambda w: np.cos(2 * np.pi * w[:, 0]), w1, 16, 2)
    assert np.allclose(c1, np.cos(2 * np.pi * w1), atol=1e-14)
    assert np.allclose(tangential_mean(lambda w: np.cos(2 * np.pi * w[:, 1]), w1, 16, 2), 0.0, atol=1e-14)
    both = tangential_mean(lambda w: np.cos(2 * np.pi * w[:, 0]) * np.cos(2 * np.pi * w[:, 1]), w1, 16, 2)
    assert np.allclose(both, 0.0, atol=1e-14)


@given(omega2, point2, point2)
def test_stationarity(bundled, om, x, y):
    om, x, y = np.array(om), np.array(x), np.array(y)
    lhs = evaluate(bundled, om, x + y)
    rhs = evaluate(bundled, bundled.phase(om, y), x)
    # phases agree mod 1; trig polynomials agree to roundoff
    assert np.allclose(lhs.a, rhs.a, atol=1e-11)
    assert np.allclose(lhs.b, rhs.b, atol=1e-10)


@given(omega2, point2)
def test_pointwise_invariants(bundled, om, x):
    c = evaluate(bundled, om, x)
    assert np.abs(c.sigma @ c.sigma.T - c.a).max() <= 1e-12
    assert np.array_equal(c.a, c.a.T)
    assert c.a[0, 0] == 1.0 and c.gamma[0] == 1.0
    eig = np.linalg.eigvalsh(c.a)
    lam = bundled.Lambda
    assert eig.min() >= lam and eig.max() <= 1 / lam


@given(st.lists(st.tuples(st.integers(-3, 3), st.integers(-3, 3)), min_size=1, max_size=4),
       st.lists(st.floats(-2, 2), min_size=4, max_size=4))
def test_torus_mean_linear_and_modes(ks, coef):
    ks = [k for k in ks if k != (0, 0)] or [(1, 0)]
    fs = [lambda w, k=k: np.cos(2 * np.pi * (w @ np.array(k, dtype=float))) for k in ks]
    for f in fs:
        assert abs(torus_mean(f, 8, 2)) <= 1e-13
    combo = lambda w: sum(c * f(w) for c, f in zip(coef, fs)) + coef[0]
    assert torus_mean(combo, 8, 2) == pytest.approx(coef[0], abs=1e-12)


@given(st.integers(-2, 2), st.integers(-2, 2), st.floats(0, 1))
def test_tower_property(k1, k2, ph):
    f = lambda w: np.cos(2 * np.pi * (k1 * w[:, 0] + k2 * w[:, 1]) + ph) + w[:, 0] ** 0
    grid = np.arange(8) / 8
    outer = np.mean(tangential_mean(f, grid, 8, 2))
    assert outer == pytest.approx(torus_mean(f, 8, 2), abs=1e-12)


def test_constant_field_zero_drift():
    f = build_field(FieldSpec(3, np.array([[1, .2, 0], [.2, 2, .1], [0, .1, 1.5]])))
    env = np.random.default_rng(0).uniform(size=(50, 3))
    assert np.array_equal(f.b_at(env), np.zeros((50, 3)))


def test_sqrtm_matches_eigh():
    rng = np.random.default_rng(1)
    for d in (1, 2, 3):
        m = rng.normal(size=(5, d, d))
        a = m @ np.swapaxes(m, -1, -2) + d * np.eye(d)
        r = sqrtm_spd(a)
        assert np.allclose(r @ r, a, atol=1e-12)
        assert np.allclose(r, np.swapaxes(r, -1, -2))


def test_quasi_phase_uses_frequency():
    spec = identity_spec(2)
    F = np.array([[1.0, 0.0], [0.5, 1.0]])
    q = FieldSpec(2, np.eye(2), family="quasi-periodic", frequency=F)
    fq = build_field(q)
    assert np.allclose(fq.phase([0, 0], [0.2, 0.4]), np.mod(F @ [0.2, 0.4], 1.0))
    assert build_field(spec).phase([0.9, 0.0], [0.3, 0.0])[0] == pytest.approx(0.2)


def test_layered_spec_matches_bundled():
    from rsdehom.harness.config import bundled_path
    b = load_spec(bundled_path("fields", "layered.yaml"))
    assert np.allclose(build_field(b).a_at(np.array([[0.1, 0.3]])), build_field(layered_spec()).a_at(
        np.array([[0.1, 0.3]])))
