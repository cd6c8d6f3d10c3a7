"""Homogenized coefficients from the cell correctors, by independent routes.

Routes for the effective matrix:
  * quadratic form  A_ij = M[(e_i + Du^i) . a (e_j + Du^j)]   (canonical)
  * short formula   A_ij = M[(e_i + Du^i) . a e_j]
  * variational     X.A X = min_phi M[(X + D phi) . a (X + D phi)], minimized
                    directly with L-BFGS (no use of the corrector solves),
                    off-diagonals by polarization.
The reflection vector is Gamma_i = M[(e_i + Du^i) . gamma] with gamma = a e_1.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import NamedTuple

import numpy as np
from scipy import optimize

from . import corrector as cr
from .errors import BadEffective, NoConvergence, RouteMismatch
from .medium import CoefficientField, sqrtm_spd, torus_grid

ROUTE_TOL = 1e-6


class MatrixRoutes(NamedTuple):
    A: np.ndarray  # symmetrized quadratic form
    A_sym: np.ndarray  # quadratic form as computed
    A_short: np.ndarray
    discrepancy: float


def _shifted_grads(op: cr.GalerkinOperator, correctors) -> np.ndarray:
    """(e_i + Du^i) on the grid, shape (d_i, d, ...)."""
    d = op.dim
    if len(correctors) != d or any(s.lam != 0 for s in correctors):
        raise ValueError("need one cell corrector (lam = 0) per direction")
    out = np.stack([s.grad_grid(op) for s in sorted(correctors, key=lambda s: s.direction)])
    for i in range(d):
        out[i, i] += 1.0
    return out


def effective_matrix(field: CoefficientField, correctors, op: cr.GalerkinOperator | None = None,
                     tol: float | None = ROUTE_TOL) -> MatrixRoutes:
    op = op or cr.GalerkinOperator(field, correctors[0].cutoff)
    v = _shifted_grads(op, correctors)
    av = np.einsum("kl...,il...->ik...", op.a, v)  # a (e_i + Du^i)
    A_sym = np.einsum("ik...,jk...->ij...", v, av).reshape(op.dim, op.dim, -1).mean(axis=-1)
    A_short = av.reshape(op.dim, op.dim, -1).mean(axis=-1)
    disc = float(np.abs(A_sym - A_short).max())
    if tol is not None and disc > tol:
        raise RouteMismatch(f"quadratic form and short formula differ by {disc:.3e}")
    return MatrixRoutes(0.5 * (A_sym + A_sym.T), A_sym, A_short, disc)


def effective_reflection(field: CoefficientField, correctors, op: cr.GalerkinOperator | None = None,
                         tol: float | None = ROUTE_TOL) -> np.ndarray:
    """Gamma = M[(I + zeta^*) gamma], checked against the first row of the short formula."""
    op = op or cr.GalerkinOperator(field, correctors[0].cutoff)
    v = _shifted_grads(op, correctors)
    gamma = np.moveaxis(field.gamma_at(torus_grid(op.n, op.dim)), -1, 0)
    G = np.einsum("ik...,k...->i...", v, gamma).reshape(op.dim, -1).mean(axis=-1)
    if tol is not None:
        row = effective_matrix(field, correctors, op, tol=None).A_short[0]
        gap = float(np.abs(G - row).max())
        if gap > tol:
            raise RouteMismatch(f"Gamma differs from the first row of A by {gap:.3e}")
    return G


def gamma_slice_profile(field: CoefficientField, correctors, op: cr.GalerkinOperator | None = None):
    """Tangential-slice averages of (e_i + Du^i) . gamma as functions of w_1.

    Returns (profile of shape (d, n), Gamma from averaging the profile over w_1).
    Each profile is constant in w_1 because the corrected flux is divergence free.
    """
    op = op or cr.GalerkinOperator(field, correctors[0].cutoff)
    v = _shifted_grads(op, correctors)
    gamma = np.moveaxis(field.gamma_at(torus_grid(op.n, op.dim)), -1, 0)
    h = np.einsum("ik...,k...->i...", v, gamma)
    prof = h.reshape(op.dim, op.n, -1).mean(axis=-1)
    return prof, prof.mean(axis=-1)


# ---------------------------------------------------------------------------
# variational route


def corrector_combination(correctors, X) -> np.ndarray:
    """Coefficients of phi = sum_i X_i u^i."""
    X = np.asarray(X, dtype=float)
    return sum(X[s.direction] * s.coeffs for s in correctors)


def variational_value(field: CoefficientField, phi, X, op: cr.GalerkinOperator | None = None,
                      cutoff: int = 32) -> float:
    """M[(X + D phi) . a (X + D phi)] for phi given by Galerkin coefficients (None means 0)."""
    op = op or cr.GalerkinOperator(field, cutoff)
    X = np.asarray(X, dtype=float)
    grad = np.zeros((op.dim,) + op.shape) if phi is None else op.grad(np.where(op.mask, phi, 0))
    v = grad + X.reshape((-1,) + (1,) * op.dim)
    return float(np.einsum("i...,ij...,j...->...", v, op.a, v).mean())


@dataclass
class VariationalResult:
    value: float
    coeffs: np.ndarray
    iterations: int
    grad_norm: float


def variational_minimize(field: CoefficientField, X, cutoff: int = 32, tol: float = 1e-10,
                         op: cr.GalerkinOperator | None = None, max_iter: int = 5000) -> VariationalResult:
    """Minimize the energy over real trial functions phi = Re sum_k c_k e_k, |k_j| <= cutoff.

    Works in the rescaled variables w_k = s_k^-1 c_k with s_k = (q.M[a] q)^-1/2,
    which makes the Hessian close to the identity.
    """
    op = op or cr.GalerkinOperator(field, cutoff)
    X = np.asarray(X, dtype=float)
    m = op.galerkin_mask(0.0)
    qaq = np.einsum("i...,ij,j...->...", op.q, op.mean_a, op.q)
    scale = np.where(m, 1.0 / np.sqrt(np.where(m, qaq, 1.0)), 0.0)[m]
    n_free = int(m.sum())
    Xb = X.reshape((-1,) + (1,) * op.dim)

    def unpack(w):
        c = np.zeros(op.shape, dtype=complex)
        c[m] = scale * (w[:n_free] + 1j * w[n_free:])
        return c

    def energy(w):
        c = unpack(w)
        v = Xb + op.grad(c)
        flux = np.einsum("ij...,j...->i...", op.a, v)
        J = float(np.einsum("i...,i...->...", v, flux).mean())
        # g = div(flux); dJ/dRe c_k = -2 Re g_k, dJ/dIm c_k = -2 Im g_k
        g = np.sum(1j * op.q * np.stack([op.to_coef(f) for f in flux]), axis=0)[m]
        grad = -2.0 * np.concatenate([g.real, g.imag])
        return J, grad * np.concatenate([scale, scale])

    w0 = np.zeros(2 * n_free)
    res = optimize.minimize(energy, w0, jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter, "maxcor": 30, "ftol": 1e-16, "gtol": tol})
    J, grad = energy(res.x)
    gnorm = float(np.abs(grad).max())
    ref = float(X @ op.mean_a @ X) if np.any(X) else 1.0
    if gnorm > max(1e3 * tol, 1e-7) * max(ref, 1e-300):
        raise NoConvergence(f"variational minimization stopped with gradient {gnorm:.3e}: {res.message}",
                            iterations=int(res.nit), residual=gnorm)
    return VariationalResult(J, unpack(res.x), int(res.nit), gnorm)


def variational_matrix(field: CoefficientField, cutoff: int = 32, tol: float = 1e-10,
                       op: cr.GalerkinOperator | None = None) -> np.ndarray:
    """Effective matrix from variational minima, off-diagonals by polarization."""
    op = op or cr.GalerkinOperator(field, cutoff)
    d = op.dim
    E = np.eye(d)
    Q = np.empty((d, d))
    for i in range(d):
        Q[i, i] = variational_minimize(field, E[i], tol=tol, op=op).value
    for i in range(d):
        for j in range(i + 1, d):
            s = variational_minimize(field, E[i] + E[j], tol=tol, op=op).value
            Q[i, j] = Q[j, i] = 0.5 * (s - Q[i, i] - Q[j, j])
    return Q


# ---------------------------------------------------------------------------


@dataclass
class EffectiveCoefficients:
    A: np.ndarray
    Gamma: np.ndarray
    Lambda: float
    mean_a: np.ndarray
    residuals: dict = dc_field(default_factory=dict)
    routes: dict = dc_field(default_factory=dict)
    provenance: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.Gamma = np.asarray(self.Gamma, dtype=float)
        self.mean_a = np.asarray(self.mean_a, dtype=float)

    @property
    def dim(self) -> int:
        return len(self.Gamma)

    def sqrt(self) -> np.ndarray:
        return sqrtm_spd(self.A)

    def bounds(self) -> dict[str, float]:
        """Margins that must be >= 0 (up to roundoff) for a valid result."""
        lam = self.Lambda
        return {
            "lower": float(np.linalg.eigvalsh(self.A - lam * np.eye(self.dim)).min()),
            "upper": float(np.linalg.eigvalsh(self.mean_a - self.A).min()),
            "gamma1": float(self.Gamma[0] - lam),
            "gamma_row": -float(np.abs(self.Gamma - self.A[0]).max()),
        }

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(), "Gamma": self.Gamma.tolist(), "Lambda": self.Lambda,
            "mean_a": self.mean_a.tolist(), "residuals": dict(self.residuals),
            "routes": {k: np.asarray(v).tolist() for k, v in self.routes.items()},
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EffectiveCoefficients":
        return cls(A=np.array(data["A"]), Gamma=np.array(data["Gamma"]), Lambda=data["Lambda"],
                   mean_a=np.array(data["mean_a"]), residuals=dict(data.get("residuals", {})),
                   routes={k: np.array(v) for k, v in data.get("routes", {}).items()},
                   provenance=dict(data.get("provenance", {})))

    @classmethod
    def constant(cls, A, Gamma, Lambda: float = 0.0) -> "EffectiveCoefficients":
        """Wrap given coefficients (e.g. for driving the limit simulator directly)."""
        A = np.asarray(A, dtype=float)
        return cls(A=A, Gamma=np.asarray(Gamma, dtype=float), Lambda=Lambda, mean_a=A)


def compute_effective(field: CoefficientField, cutoff: int = 64, tol: float = cr.DEFAULT_TOL,
                      route_tol: float = ROUTE_TOL, variational: bool = True) -> EffectiveCoefficients:
    op = cr.GalerkinOperator(field, cutoff)
    cells = cr.solve_all_cells(field, tol=tol, op=op)
    routes = effective_matrix(field, cells, op, tol=route_tol)
    G = effective_reflection(field, cells, op, tol=route_tol)
    residuals = {
        "sym_short": routes.discrepancy,
        "gamma_row": float(np.abs(G - routes.A_short[0]).max()),
        "orthogonality": max(cr.orthogonality_residual(op, s) for s in cells),
        "cell_residual": max(s.residual for s in cells),
    }
    route_arrays = {"A_sym": routes.A_sym, "A_short": routes.A_short}
    if variational:
        A_var = variational_matrix(field, tol=tol, op=op)
        residuals["var_sym"] = float(np.abs(A_var - routes.A).max())
        route_arrays["A_var"] = A_var
        if residuals["var_sym"] > route_tol:
            raise RouteMismatch(f"variational route differs by {residuals['var_sym']:.3e}")
    if np.linalg.eigvalsh(routes.A).min() <= 0 or not G[0] > 0:
        raise BadEffective("effective coefficients are not positive")
    prov = {"field": field.spec.name, "field_digest": field.spec.digest(), "cutoff": cutoff,
            "grid_n": op.n, "tol": tol, "route_tol": route_tol}
    return EffectiveCoefficients(routes.A, G, field.Lambda, op.mean_a.copy(), residuals,
                                 route_arrays, prov)
