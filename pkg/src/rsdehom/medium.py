"""Stationary coefficient fields on the torus.

A field is a symmetric matrix-valued trigonometric polynomial

    a(w) = a0 + sum_m A_m cos(2 pi k_m . w + phi_m),     w in [0, 1)^d,

read along the translation flow ``w -> w + P x (mod 1)`` where ``P`` is the
identity (periodic family) or a frequency matrix (quasi-periodic family).
The first row/column convention ``a_11 == 1`` is enforced on the spec, so
``gamma_1 == 1`` holds exactly in floating point.

Derived quantities use analytic derivatives of the polynomial:

    b_j     = 1/2 sum_i d/dx_i a_ij
    gamma_j = a_j1
    sigma   = symmetric positive square root of a
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import yaml

from .errors import BadSpec, NonElliptic

TWO_PI = 2.0 * np.pi
SAFETY = 0.95
FAMILIES = ("periodic", "quasi-periodic")


@dataclass(frozen=True)
class Mode:
    k: tuple[int, ...]
    amplitude: np.ndarray
    phase: float = 0.0


@dataclass(frozen=True)
class FieldSpec:
    """Parameters of a coefficient field.

    ``frequency`` is only read for the quasi-periodic family; rows index torus
    coordinates and columns index physical coordinates.
    """

    dim: int
    base: np.ndarray
    modes: tuple[Mode, ...] = ()
    family: str = "periodic"
    frequency: np.ndarray | None = None
    floor: float = 0.0
    name: str = ""

    def validate(self) -> None:
        d = self.dim
        if d < 1:
            raise BadSpec(f"dimension must be >= 1, got {d}")
        base = np.asarray(self.base, dtype=float)
        if base.shape != (d, d):
            raise BadSpec(f"base matrix has shape {base.shape}, expected {(d, d)}")
        if not np.array_equal(base, base.T):
            raise BadSpec("base matrix is not symmetric")
        if base[0, 0] != 1.0:
            raise BadSpec("base matrix must have a_11 == 1")
        for m in self.modes:
            amp = np.asarray(m.amplitude, dtype=float)
            if len(m.k) != d:
                raise BadSpec(f"wavevector {m.k} has wrong length")
            if amp.shape != (d, d):
                raise BadSpec(f"amplitude for k={m.k} has shape {amp.shape}")
            if not np.array_equal(amp, amp.T):
                raise BadSpec(f"amplitude for k={m.k} is not symmetric")
            if amp[0, 0] != 0.0:
                raise BadSpec(f"amplitude for k={m.k} perturbs a_11")
            if not all(float(ki).is_integer() for ki in m.k):
                raise BadSpec(f"wavevector {m.k} is not integer")
        if self.family not in FAMILIES:
            raise BadSpec(f"unknown family {self.family!r}")
        if self.family == "quasi-periodic":
            if self.frequency is None:
                raise BadSpec("quasi-periodic family needs a frequency matrix")
            F = np.asarray(self.frequency, dtype=float)
            if F.shape != (d, d):
                raise BadSpec(f"frequency matrix has shape {F.shape}")
            if abs(np.linalg.det(F)) < 1e-12:
                raise BadSpec("frequency matrix is singular")

    @property
    def flow(self) -> np.ndarray:
        if self.family == "quasi-periodic":
            return np.asarray(self.frequency, dtype=float)
        return np.eye(self.dim)

    @property
    def degree(self) -> int:
        """Largest |k_j| over all modes (0 for constant fields)."""
        if not self.modes:
            return 0
        return int(max(max(abs(int(ki)) for ki in m.k) for m in self.modes))

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "dimension": self.dim,
            "family": self.family,
            "base": np.asarray(self.base, dtype=float).ravel().tolist(),
            "modes": [
                {
                    "k": [int(ki) for ki in m.k],
                    "amplitude": np.asarray(m.amplitude, dtype=float).ravel().tolist(),
                    "phase": float(m.phase),
                }
                for m in self.modes
            ],
            "floor": float(self.floor),
        }
        if self.frequency is not None:
            out["frequency"] = np.asarray(self.frequency, dtype=float).ravel().tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FieldSpec":
        try:
            d = int(data["dimension"])
            base = np.asarray(data["base"], dtype=float).reshape(d, d)
            modes = tuple(
                Mode(
                    k=tuple(int(ki) for ki in m["k"]),
                    amplitude=np.asarray(m["amplitude"], dtype=float).reshape(d, d),
                    phase=float(m.get("phase", 0.0)),
                )
                for m in data.get("modes", [])
            )
            freq = data.get("frequency")
            if freq is not None:
                freq = np.asarray(freq, dtype=float).reshape(d, d)
        except (KeyError, ValueError, TypeError) as exc:
            raise BadSpec(f"malformed field spec: {exc}") from exc
        spec = cls(
            dim=d,
            base=base,
            modes=modes,
            family=data.get("family", "periodic"),
            frequency=freq,
            floor=float(data.get("floor", 0.0)),
            name=str(data.get("name", "")),
        )
        spec.validate()
        return spec

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_spec(path: str | Path) -> FieldSpec:
    with open(path) as fh:
        return FieldSpec.from_dict(yaml.safe_load(fh))


def save_spec(spec: FieldSpec, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(spec.to_dict(), fh, sort_keys=False, default_flow_style=None)


class Coefficients(NamedTuple):
    a: np.ndarray
    sigma: np.ndarray
    b: np.ndarray
    gamma: np.ndarray


@dataclass(frozen=True, eq=False)
class CoefficientField:
    spec: FieldSpec
    Lambda: float
    eig_min: float
    eig_max: float
    cert_grid: int
    # mode tables, derived from spec
    _k: np.ndarray = dc_field(repr=False)
    _amp: np.ndarray = dc_field(repr=False)
    _phase: np.ndarray = dc_field(repr=False)
    _q: np.ndarray = dc_field(repr=False)
    _aq: np.ndarray = dc_field(repr=False)

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def flow(self) -> np.ndarray:
        return self.spec.flow

    @property
    def is_constant(self) -> bool:
        return len(self._phase) == 0

    def phase(self, omega, x) -> np.ndarray:
        """Torus point tau_x omega, reduced to [0, 1)^d."""
        omega = np.asarray(omega, dtype=float)
        x = np.asarray(x, dtype=float)
        if self.spec.family == "periodic":
            shift = x
        else:
            shift = x @ self.flow.T
        env = np.mod(omega + shift, 1.0)
        # mod of a tiny negative number rounds up to exactly 1.0
        return np.where(env >= 1.0, 0.0, env)

    def _angles(self, env):
        return TWO_PI * (env @ self._k.T) + self._phase

    def a_at(self, env) -> np.ndarray:
        env = np.asarray(env, dtype=float)
        base = np.broadcast_to(self.spec.base, env.shape[:-1] + (self.dim, self.dim))
        if self.is_constant:
            return base.copy()
        cos = np.cos(self._angles(env))
        return base + np.einsum("...m,mij->...ij", cos, self._amp)

    def b_at(self, env) -> np.ndarray:
        env = np.asarray(env, dtype=float)
        if self.is_constant:
            return np.zeros(env.shape)
        sin = np.sin(self._angles(env))
        return -np.pi * np.einsum("...m,mj->...j", sin, self._aq)

    def local(self, env) -> tuple[np.ndarray, np.ndarray]:
        """(a, b) at ``env`` sharing one evaluation of the mode angles."""
        env = np.asarray(env, dtype=float)
        base = np.broadcast_to(self.spec.base, env.shape[:-1] + (self.dim, self.dim))
        if self.is_constant:
            return base.copy(), np.zeros(env.shape)
        ang = self._angles(env)
        a = base + np.einsum("...m,mij->...ij", np.cos(ang), self._amp)
        return a, -np.pi * np.einsum("...m,mj->...j", np.sin(ang), self._aq)

    def gamma_at(self, env) -> np.ndarray:
        return self.a_at(env)[..., :, 0]

    def coefficients_at(self, env) -> Coefficients:
        env = np.asarray(env, dtype=float)
        a = self.a_at(env)
        return Coefficients(a=a, sigma=sqrtm_spd(a), b=self.b_at(env), gamma=a[..., :, 0].copy())

    def grad_a_at(self, env) -> np.ndarray:
        """Physical-space derivatives d/dx_l a_ij, shape (..., d, d, d) indexed [l, i, j]."""
        env = np.asarray(env, dtype=float)
        if self.is_constant:
            return np.zeros(env.shape[:-1] + (self.dim,) * 3)
        sin = np.sin(self._angles(env))
        return -TWO_PI * np.einsum("...m,ml,mij->...lij", sin, self._q, self._amp)


def build_field(spec: FieldSpec, cert_grid: int = 64) -> CoefficientField:
    """Validate ``spec`` and certify its ellipticity on a uniform grid.

    The reported ``Lambda`` satisfies ``Lambda I <= a <= Lambda^-1 I`` on the
    scanned points, shrunk by the safety factor 0.95.
    """
    spec.validate()
    d = spec.dim
    if spec.modes:
        k = np.array([m.k for m in spec.modes], dtype=float)
        amp = np.array([np.asarray(m.amplitude, dtype=float) for m in spec.modes])
        ph = np.array([m.phase for m in spec.modes], dtype=float)
    else:
        k = np.zeros((0, d))
        amp = np.zeros((0, d, d))
        ph = np.zeros(0)
    q = k @ spec.flow  # q_m = P^T k_m
    aq = np.einsum("mij,mi->mj", amp, q)
    proto = CoefficientField(spec, 1.0, 1.0, 1.0, cert_grid, k, amp, ph, q, aq)

    pts = torus_grid(cert_grid, d).reshape(-1, d)
    eigs = np.linalg.eigvalsh(proto.a_at(pts))
    lo, hi = float(eigs.min()), float(eigs.max())
    if lo <= spec.floor or lo <= 0.0:
        raise NonElliptic(f"scanned minimum eigenvalue {lo:.6g} <= floor {spec.floor:.6g}")
    lam = SAFETY * min(lo, 1.0 / hi)
    return CoefficientField(spec, lam, lo, hi, cert_grid, k, amp, ph, q, aq)


def load_field(path: str | Path, cert_grid: int = 64) -> CoefficientField:
    return build_field(load_spec(path), cert_grid)


def evaluate(field: CoefficientField, omega, x) -> Coefficients:
    """Coefficients at the environment point tau_x omega."""
    return field.coefficients_at(field.phase(omega, x))


def sqrtm_spd(a: np.ndarray) -> np.ndarray:
    """Symmetric positive square root of a stack of SPD matrices."""
    a = np.asarray(a, dtype=float)
    d = a.shape[-1]
    if d == 1:
        return np.sqrt(a)
    if d == 2:
        # sqrt(A) = (A + s I) / t with s = sqrt(det A), t = sqrt(tr A + 2 s)
        s = np.sqrt(a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0])
        t = np.sqrt(a[..., 0, 0] + a[..., 1, 1] + 2.0 * s)
        out = a.copy()
        out[..., 0, 0] += s
        out[..., 1, 1] += s
        return out / t[..., None, None]
    w, v = np.linalg.eigh(a)
    return np.einsum("...ik,...k,...jk->...ij", v, np.sqrt(w), v)


def torus_grid(n: int, dim: int) -> np.ndarray:
    """Uniform grid on [0,1)^dim, shape (n,)*dim + (dim,), 'ij' indexing."""
    axes = [np.arange(n) / n] * dim
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _mean0(values: np.ndarray):
    # constant samples return exactly, without summation roundoff
    if values.size and np.all(values == values[0]):
        return values[0].copy()
    return values.mean(axis=0)


def torus_mean(fn: Callable[[np.ndarray], np.ndarray], grid_n: int, dim: int):
    """Uniform-grid quadrature of the torus average of ``fn``.

    Exact for trigonometric polynomials of degree < ``grid_n``.  ``fn`` receives
    an array of points with shape (npts, dim) and may return extra trailing axes.
    """
    pts = torus_grid(grid_n, dim).reshape(-1, dim)
    vals = np.asarray(fn(pts), dtype=float)
    out = _mean0(vals)
    return float(out) if np.ndim(out) == 0 else out


def tangential_mean(fn: Callable[[np.ndarray], np.ndarray], omega1, grid_n: int, dim: int):
    """Average of ``fn`` over the slice {omega1} x T^(dim-1).

    ``omega1`` may be an array; the result then has its shape.
    """
    w1 = np.atleast_1d(np.asarray(omega1, dtype=float))
    if dim == 1:
        vals = np.asarray(fn(w1[:, None]), dtype=float)
        return vals if np.ndim(omega1) else vals[0]
    rest = torus_grid(grid_n, dim - 1).reshape(-1, dim - 1)
    pts = np.concatenate(
        [np.repeat(w1[:, None], len(rest), axis=0), np.tile(rest, (len(w1), 1))], axis=1
    )
    vals = np.asarray(fn(pts), dtype=float)
    vals = vals.reshape((len(w1), len(rest)) + vals.shape[1:])
    out = np.stack([_mean0(v) for v in vals])
    return out if np.ndim(omega1) else out[0]


def identity_spec(dim: int = 2) -> FieldSpec:
    return FieldSpec(dim=dim, base=np.eye(dim), name="identity")


def layered_spec() -> FieldSpec:
    """a = diag(1, 2 + cos 2 pi x_2)."""
    return FieldSpec(
        dim=2,
        base=np.diag([1.0, 2.0]),
        modes=(Mode(k=(0, 1), amplitude=np.array([[0.0, 0.0], [0.0, 1.0]])),),
        name="layered",
    )
