"""Spectral Galerkin solver for the corrector problems on the phase torus.

Unknowns are Fourier coefficients c_k of u(w) = sum_k c_k exp(2 pi i k.w)
with max_j |k_j| <= cutoff.  The operator

    A c = lam c - 1/2 P_K [ i q . FFT( a * IFFT(i q c) ) ],   q = 2 pi F^T k,

is the Galerkin matrix of lam - L with L = 1/2 D.(a D), self-adjoint and
positive for the Parseval inner product.  Products with a are formed on a
grid of n = 2 (cutoff + degree(a) + 1) points per axis, which is alias-free
for every quantity computed here, so torus means are exact quadratures.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .errors import MeanNotZero, NoConvergence
from .medium import TWO_PI, CoefficientField, torus_grid

DEFAULT_TOL = 1e-10
MAX_ITER = 10_000


def grid_size(cutoff: int, degree: int) -> int:
    return 2 * (cutoff + degree + 1)


class GalerkinOperator:
    """Grid, wavevectors and coefficient samples for one (field, cutoff) pair."""

    def __init__(self, field: CoefficientField, cutoff: int):
        if cutoff < 1:
            raise ValueError("cutoff must be >= 1")
        self.field = field
        self.cutoff = int(cutoff)
        d = field.dim
        self.dim = d
        self.n = grid_size(self.cutoff, field.spec.degree)
        self.shape = (self.n,) * d
        self.size = self.n**d
        freqs = np.rint(sfft.fftfreq(self.n, 1.0 / self.n)).astype(int)
        kk = np.stack(np.meshgrid(*([freqs] * d), indexing="ij"), axis=-1)  # (..., d) integer modes
        self.k = kk
        self.mask = np.all(np.abs(kk) <= self.cutoff, axis=-1)
        # physical wavevectors: q_j = 2 pi sum_l k_l F_lj
        self.q = TWO_PI * np.moveaxis(kk @ field.flow, -1, 0)  # (d, ...)
        env = torus_grid(self.n, d)
        self.a = np.moveaxis(field.a_at(env), (-2, -1), (0, 1))  # (d, d, ...)
        self.b = np.moveaxis(field.b_at(env), -1, 0)  # (d, ...)
        self.mean_a = self.a.reshape(d, d, -1).mean(axis=-1)

    # -- transforms ----------------------------------------------------
    def to_coef(self, u: np.ndarray) -> np.ndarray:
        return sfft.fftn(u) / self.size

    def to_phys(self, c: np.ndarray) -> np.ndarray:
        return (sfft.ifftn(c) * self.size).real

    def grad(self, c: np.ndarray) -> np.ndarray:
        """Physical gradient D u on the grid, shape (d, ...)."""
        return np.stack([self.to_phys(1j * self.q[j] * c) for j in range(self.dim)])

    def flux_coef(self, du: np.ndarray, shift: int | None = None) -> np.ndarray:
        """Fourier coefficients of the vector field a (e_shift + du)."""
        v = du.copy()
        if shift is not None:
            v[shift] += 1.0
        flux = np.einsum("ji...,i...->j...", self.a, v)
        return np.stack([self.to_coef(flux[j]) for j in range(self.dim)])

    # -- operator ------------------------------------------------------
    def galerkin_mask(self, lam: float) -> np.ndarray:
        m = self.mask.copy()
        if lam == 0:
            m[(0,) * self.dim] = False
        return m

    def apply(self, c: np.ndarray, lam: float) -> np.ndarray:
        fc = self.flux_coef(self.grad(c))
        out = lam * c - 0.5 * np.sum(1j * self.q * fc, axis=0)
        return np.where(self.galerkin_mask(lam), out, 0.0)

    def rhs(self, i: int) -> np.ndarray:
        return np.where(self.mask, self.to_coef(self.b[i]), 0.0)

    def preconditioner(self, lam: float) -> np.ndarray:
        diag = lam + 0.5 * np.einsum("i...,ij,j...->...", self.q, self.mean_a, self.q)
        return np.where(self.galerkin_mask(lam), 1.0 / np.where(diag > 0, diag, 1.0), 0.0)


def inner(u: np.ndarray, v: np.ndarray) -> float:
    """Real L2(torus) inner product of two real fields given by coefficients."""
    return float(np.vdot(u, v).real)


def norm(c: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.abs(c) ** 2)))


def pcg(apply, rhs: np.ndarray, precond: np.ndarray, tol: float, max_iter: int = MAX_ITER):
    """Preconditioned conjugate gradients; returns (x, iterations, relative residual)."""
    bnorm = norm(rhs)
    x = np.zeros_like(rhs)
    if bnorm == 0.0:
        return x, 0, 0.0
    r = rhs.copy()
    z = precond * r
    p = z.copy()
    rz = inner(r, z)
    for it in range(1, max_iter + 1):
        Ap = apply(p)
        alpha = rz / inner(p, Ap)
        x += alpha * p
        r -= alpha * Ap
        rel = norm(r) / bnorm
        if rel <= tol:
            return x, it, rel
        z = precond * r
        rz_new = inner(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NoConvergence(
        f"CG stalled at relative residual {rel:.3e} after {max_iter} iterations",
        iterations=max_iter,
        residual=rel,
        diagnostics={"precond_min": float(precond[precond > 0].min()),
                     "precond_max": float(precond.max())},
    )


@dataclass
class CorrectorSolution:
    direction: int
    lam: float
    cutoff: int
    coeffs: np.ndarray
    residual: float
    iterations: int
    tol: float
    field_digest: str = ""
    meta: dict = dc_field(default_factory=dict)

    @property
    def grid_n(self) -> int:
        return self.coeffs.shape[0]

    def l2(self) -> float:
        return norm(self.coeffs)

    def grad_l2(self, op: GalerkinOperator) -> float:
        return float(np.sqrt(np.sum(np.abs(op.q * self.coeffs) ** 2)))

    def grad_grid(self, op: GalerkinOperator) -> np.ndarray:
        return op.grad(self.coeffs)

    def u_grid(self, op: GalerkinOperator) -> np.ndarray:
        return op.to_phys(self.coeffs)

    def save(self, path: str | Path) -> None:
        meta = {
            "direction": self.direction, "lam": self.lam, "cutoff": self.cutoff,
            "residual": self.residual, "iterations": self.iterations, "tol": self.tol,
            "field_digest": self.field_digest, "meta": self.meta,
        }
        np.savez(path, coeffs=self.coeffs, meta=np.array(json.dumps(meta)))

    @classmethod
    def load(cls, path: str | Path) -> "CorrectorSolution":
        with np.load(path) as data:
            meta = json.loads(str(data["meta"]))
            coeffs = data["coeffs"]
        return cls(coeffs=coeffs, **meta)


def _solve(op: GalerkinOperator, i: int, lam: float, tol: float, max_iter: int) -> CorrectorSolution:
    if not 0 <= i < op.dim:
        raise ValueError(f"direction {i} out of range for dimension {op.dim}")
    rhs = op.rhs(i)
    if lam == 0:
        mean = abs(rhs[(0,) * op.dim])
        if mean > 1e-12 * max(1.0, norm(rhs)):
            raise MeanNotZero(f"b_{i} has torus mean {mean:.3e}")
        rhs[(0,) * op.dim] = 0.0
    x, it, _ = pcg(lambda c: op.apply(c, lam), rhs, op.preconditioner(lam), tol, max_iter)
    bnorm = norm(rhs)
    res = norm(rhs - op.apply(x, lam)) / bnorm if bnorm > 0 else 0.0
    return CorrectorSolution(i, float(lam), op.cutoff, x, res, it, tol, op.field.spec.digest(),
                             {"grid_n": op.n})


def solve_resolvent(field: CoefficientField, i: int, lam: float, cutoff: int = 32,
                    tol: float = DEFAULT_TOL, max_iter: int = MAX_ITER,
                    op: GalerkinOperator | None = None) -> CorrectorSolution:
    """Galerkin solution of lam u - L u = b_i (direction ``i`` is 0-based)."""
    if not lam > 0:
        raise ValueError("resolvent parameter must be positive")
    return _solve(op or GalerkinOperator(field, cutoff), i, lam, tol, max_iter)


def solve_cell(field: CoefficientField, i: int, cutoff: int = 32, tol: float = DEFAULT_TOL,
               max_iter: int = MAX_ITER, op: GalerkinOperator | None = None) -> CorrectorSolution:
    """Mean-zero Galerkin solution of -L u = b_i; its gradient is zeta^i."""
    return _solve(op or GalerkinOperator(field, cutoff), i, 0.0, tol, max_iter)


def solve_all_cells(field: CoefficientField, cutoff: int = 32, tol: float = DEFAULT_TOL,
                    op: GalerkinOperator | None = None) -> list[CorrectorSolution]:
    op = op or GalerkinOperator(field, cutoff)
    return [solve_cell(field, i, tol=tol, op=op) for i in range(field.dim)]


# ---------------------------------------------------------------------------
# diagnostics


def weak_residual(op: GalerkinOperator, sol: CorrectorSolution) -> float:
    """max over Galerkin test modes of |lam (u,phi) + 1/2 (a Du, D phi) - (b_i, phi)| / |b_i|_2."""
    r = op.apply(sol.coeffs, sol.lam) - np.where(op.galerkin_mask(sol.lam), op.rhs(sol.direction), 0)
    bnorm = norm(op.rhs(sol.direction))
    return float(np.abs(r).max() / bnorm) if bnorm > 0 else float(np.abs(r).max())


def energy_defect(op: GalerkinOperator, sol: CorrectorSolution) -> float:
    """lam |u|^2 + 1/2 M[Du . a Du] - M[b_i u], evaluated by grid quadrature."""
    du = sol.grad_grid(op)
    u = sol.u_grid(op)
    quad = np.einsum("i...,ij...,j...->...", du, op.a, du).mean()
    return float(sol.lam * np.mean(u * u) + 0.5 * quad - np.mean(op.b[sol.direction] * u))


def orthogonality_residual(op: GalerkinOperator, sol: CorrectorSolution) -> float:
    """max over Galerkin modes psi of |M[(e_i + zeta^i) . a D psi]|, from grid quadrature."""
    fc = op.flux_coef(sol.grad_grid(op), shift=sol.direction)
    vals = np.abs(np.sum(op.q * fc, axis=0))
    return float(vals[op.mask].max())


def symmetry_defect(op: GalerkinOperator, lam: float, rng: np.random.Generator) -> float:
    """|(A u, v) - (u, A v)| for two random real trial functions."""

    def trial():
        u = op.to_coef(rng.standard_normal(op.shape))
        return np.where(op.galerkin_mask(lam), u, 0.0)

    u, v = trial(), trial()
    return abs(inner(op.apply(u, lam), v) - inner(u, op.apply(v, lam)))


def embed(coeffs: np.ndarray, op: GalerkinOperator) -> np.ndarray:
    """Place coefficients from a (possibly smaller) grid into ``op``'s layout."""
    n_src = coeffs.shape[0]
    freqs = np.rint(sfft.fftfreq(n_src, 1.0 / n_src)).astype(int)
    out = np.zeros(op.shape, dtype=complex)
    idx = np.ix_(*([np.mod(freqs, op.n)] * op.dim))
    if n_src > op.n:
        raise ValueError("source grid larger than target")
    out[idx] = coeffs
    return out


def refinement_delta(field: CoefficientField, i: int, cutoff: int, tol: float = DEFAULT_TOL) -> float:
    """|zeta^i(cutoff) - zeta^i(2 cutoff)|_2."""
    coarse = solve_cell(field, i, cutoff, tol)
    op = GalerkinOperator(field, 2 * cutoff)
    fine = solve_cell(field, i, tol=tol, op=op)
    diff = fine.coeffs - embed(coarse.coeffs, op)
    return float(np.sqrt(np.sum(np.abs(op.q * diff) ** 2)))


@dataclass
class DecayReport:
    direction: int
    lambdas: np.ndarray
    lam_u2: np.ndarray
    sqrtlam_Du: np.ndarray
    dist_to_zeta: np.ndarray
    lam_u: np.ndarray  # |lam u_lam - M[b_i]|_2
    lam_u_sup: np.ndarray  # |lam u_lam|_inf on the grid
    zeta_norm: float
    b_norm: float
    b_sup: float
    Lambda: float

    COLUMNS = ("lambda", "lam_u2", "sqrtlam_Du", "dist_to_zeta")

    def rows(self) -> list[tuple[float, float, float, float]]:
        return [tuple(float(v) for v in r)
                for r in zip(self.lambdas, self.lam_u2, self.sqrtlam_Du, self.dist_to_zeta)]

    def checks(self, atol: float = 1e-10, rel_final: float = 1e-2) -> dict[str, bool]:
        strict = np.all(np.diff(self.lam_u2) < 0) if self.lam_u2.max() > atol else True
        return {
            "lam_u2_decreasing": bool(strict),
            "energy_bound": bool(np.all(self.sqrtlam_Du <= self.b_norm / np.sqrt(self.Lambda) + atol)),
            "sup_bound": bool(np.all(self.lam_u_sup <= self.b_sup + atol)),
            "dist_decreasing": bool(np.all(np.diff(self.dist_to_zeta) <= atol)),
            "final_close": bool(self.dist_to_zeta[-1] <= rel_final * max(self.zeta_norm, 1e-8)),
        }

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "lambda": self.lambdas.tolist(), "lam_u2": self.lam_u2.tolist(),
            "sqrtlam_Du": self.sqrtlam_Du.tolist(), "dist_to_zeta": self.dist_to_zeta.tolist(),
            "lam_u": self.lam_u.tolist(), "lam_u_sup": self.lam_u_sup.tolist(),
            "zeta_norm": self.zeta_norm, "b_norm": self.b_norm, "b_sup": self.b_sup,
            "Lambda": self.Lambda,
        }


def resolvent_decay_scan(field: CoefficientField, i: int, ladder, cutoff: int = 32,
                         tol: float = DEFAULT_TOL) -> DecayReport:
    lams = np.asarray(ladder, dtype=float)
    if lams.ndim != 1 or len(lams) < 2 or np.any(lams <= 0) or np.any(np.diff(lams) >= 0):
        raise ValueError("ladder must be strictly decreasing positive values")
    op = GalerkinOperator(field, cutoff)
    cell = solve_cell(field, i, tol=tol, op=op)
    rows = []
    for lam in lams:
        sol = solve_resolvent(field, i, lam, tol=tol, op=op)
        u2 = sol.l2() ** 2
        du = sol.grad_l2(op)
        dist = float(np.sqrt(np.sum(np.abs(op.q * (sol.coeffs - cell.coeffs)) ** 2)))
        rows.append((lam * u2, np.sqrt(lam) * du, dist, lam * sol.l2(),
                     float(np.abs(lam * sol.u_grid(op)).max())))
    r = np.array(rows)
    b = op.b[i]
    # sup of b_i on a 4x finer grid, so the grid maximum of lam u cannot outrun it
    b_fine = field.b_at(torus_grid(4 * op.n, field.dim))[..., i]
    return DecayReport(i, lams, r[:, 0], r[:, 1], r[:, 2], r[:, 3], r[:, 4], cell.grad_l2(op),
                       float(np.sqrt(np.mean(b * b))), float(np.abs(b_fine).max()), field.Lambda)
