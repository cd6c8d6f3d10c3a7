from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rsdehom import corrector as cr
from rsdehom import effective as ef
from rsdehom.errors import RouteMismatch

from conftest import SQRT3

PROBE = 1.36602540378443864676  # (1 + sqrt 3) / 2


def test_identity(identity):
    eff = ef.compute_effective(identity, cutoff=8)
    assert np.array_equal(eff.A, np.eye(2))
    assert np.array_equal(eff.Gamma, [1.0, 0.0])
    assert eff.residuals["sym_short"] == 0.0
    for X in ([1.0, 0.0], [0.6, 0.8]):
        assert ef.variational_minimize(identity, X, cutoff=4).value == pytest.approx(1.0, abs=1e-14)


def test_layered_three_routes(layered):
    eff = ef.compute_effective(layered, cutoff=64, tol=1e-12, route_tol=1e-8)
    for key in ("A_sym", "A_short", "A_var"):
        assert np.allclose(eff.routes[key], np.diag([1.0, SQRT3]), atol=1e-6)
    assert np.allclose(eff.Gamma, [1.0, 0.0], atol=1e-8)


def test_variational_values(layered):
    op = cr.GalerkinOperator(layered, 32)
    e2 = np.array([0.0, 1.0])
    assert ef.variational_value(layered, None, e2, op) == pytest.approx(2.0, abs=1e-14)
    cells = cr.solve_all_cells(layered, tol=1e-12, op=op)
    phi = ef.corrector_combination(cells, e2)
    assert ef.variational_value(layered, phi, e2, op) == pytest.approx(SQRT3, abs=1e-8)
    probe = np.array([1.0, 1.0]) / np.sqrt(2)
    assert ef.variational_minimize(layered, probe, cutoff=32, tol=1e-12).value == pytest.approx(PROBE, abs=1e-8)


@given(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), st.integers(0, 2**31))
def test_variational_upper_bound(sheared_eff, X, seed):
    field, eff, op = sheared_eff
    X = np.array(X)
    rng = np.random.default_rng(seed)
    phi = np.where(op.mask, op.to_coef(rng.standard_normal(op.shape)), 0) * 0.1
    assert ef.variational_value(field, phi, X, op) >= X @ eff.A @ X - 1e-10


@pytest.fixture(scope="module")
def sheared_eff(sheared):
    return sheared, ef.compute_effective(sheared, cutoff=16, tol=1e-12), cr.GalerkinOperator(sheared, 16)


def test_structure_on_bundled(bundled):
    eff = ef.compute_effective(bundled, cutoff=24, tol=1e-12, route_tol=1e-8)
    b = eff.bounds()
    assert b["lower"] >= -1e-8 and b["upper"] >= -1e-8 and b["gamma1"] >= -1e-8
    assert eff.Gamma[0] == pytest.approx(eff.A[0, 0], abs=1e-8)
    assert np.array_equal(eff.A, eff.A.T)
    assert eff.residuals["orthogonality"] <= 1e-8
    assert max(eff.residuals[k] for k in ("sym_short", "gamma_row", "var_sym")) <= 1e-8


def test_slice_profile_constant(bundled):
    op = cr.GalerkinOperator(bundled, 24)
    cells = cr.solve_all_cells(bundled, tol=1e-12, op=op)
    prof, G = ef.gamma_slice_profile(bundled, cells, op)
    assert np.ptp(prof, axis=1).max() <= 1e-8
    assert np.allclose(G, ef.effective_reflection(bundled, cells, op), atol=1e-10)


def test_refinement_monotone(sheared):
    X = np.array([1.0, 1.0]) / np.sqrt(2)
    vals = [ef.variational_minimize(sheared, X, k, 1e-12).value for k in (2, 4, 8, 16)]
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


def test_route_mismatch_on_unconverged(sheared):
    op = cr.GalerkinOperator(sheared, 16)
    cells = [cr.solve_cell(sheared, i, tol=1e-2, op=op) for i in range(2)]
    with pytest.raises(RouteMismatch):
        ef.effective_matrix(sheared, cells, op, tol=1e-12)


def test_serialization_roundtrip(layered_eff):
    back = ef.EffectiveCoefficients.from_dict(layered_eff.to_dict())
    assert np.array_equal(back.A, layered_eff.A) and np.array_equal(back.Gamma, layered_eff.Gamma)
    assert back.provenance == layered_eff.provenance
