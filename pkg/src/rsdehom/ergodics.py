"""Monte Carlo checks of the ergodic theorems, the invariant measure and the CLT.

Observables are callables f(x, env) on batches (x and env of shape (..., d));
torus functions simply ignore x.  The module-level classes below are picklable
so they can be shipped to worker processes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from scipy import special, stats

from . import dynamics as dy
from .errors import QuadratureFail
from .medium import TWO_PI, CoefficientField, tangential_mean, torus_grid, torus_mean

Z_PASS = 3.0
Z_FLAG = 4.0


# ---------------------------------------------------------------------------
# observables


@dataclass(frozen=True)
class Constant:
    value: float = 1.0

    def __call__(self, x, env):
        return np.full(np.shape(env)[:-1], float(self.value))


@dataclass(frozen=True)
class TorusMode:
    """cos(2 pi k.env + phase)."""

    k: tuple
    phase: float = 0.0

    def __call__(self, x, env):
        return np.cos(TWO_PI * (np.asarray(env) @ np.asarray(self.k, dtype=float)) + self.phase)


@dataclass(frozen=True)
class Coordinate:
    index: int = 0

    def __call__(self, x, env):
        return np.asarray(x)[..., self.index]


@dataclass(frozen=True, eq=False)
class CoefficientEntry:
    field: CoefficientField
    i: int
    j: int

    def __call__(self, x, env):
        return self.field.a_at(env)[..., self.i, self.j]


def as_torus_fn(f):
    return lambda env: f(None, env)


# ---------------------------------------------------------------------------


@dataclass
class EnsembleStat:
    name: str
    estimate: float
    stderr: float
    target: float
    n: int
    eps: float | None = None
    dt: float | None = None
    target_source: str = ""
    anchor: str = ""
    extra: dict = dc_field(default_factory=dict)

    @property
    def z(self) -> float:
        diff = self.estimate - self.target
        if self.stderr > 0:
            return diff / self.stderr
        if abs(diff) <= 1e-12 * max(1.0, abs(self.target)):
            return 0.0
        return math.copysign(math.inf, diff)

    @property
    def status(self) -> str:
        return z_status(self.z)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["z"] = self.z
        out["status"] = self.status
        return out


def z_status(z: float) -> str:
    az = abs(z)
    if az <= Z_PASS:
        return "pass"
    if az <= Z_FLAG:
        return "flag"
    return "fail"


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    v = np.asarray(v, dtype=float)
    n = len(v)
    se = float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(v.mean()), se


def _env(field: CoefficientField, ens: dy.Ensemble, X: np.ndarray) -> np.ndarray:
    om = ens.omega.reshape((ens.n_paths,) + (1,) * (X.ndim - 2) + (-1,))
    return field.phase(om, X / ens.eps)


def _running_volume(field, ens, f, name):
    if name is not None and name in ens.integrals:
        return ens.integrals[name]
    if not ens.full_resolution:
        raise ValueError("observable was not integrated during the run and states are subsampled")
    X = ens.X[:, :-1]
    vals = f(X, _env(field, ens, X))
    run = np.concatenate([np.zeros((ens.n_paths, 1)), np.cumsum(vals * ens.dt, axis=1)], axis=1)
    return run


def _running_boundary(field, ens, f, name):
    if name is not None and name in ens.boundary_integrals:
        return ens.boundary_integrals[name]
    if not ens.full_resolution:
        raise ValueError("observable was not integrated during the run and states are subsampled")
    X = ens.X[:, 1:]
    dK = np.diff(ens.K, axis=1)
    vals = np.where(dK > 0, f(X, _env(field, ens, X)), 0.0) * dK
    return np.concatenate([np.zeros((ens.n_paths, 1)), np.cumsum(vals, axis=1)], axis=1)


def verify_volume_average(ens: dy.Ensemble, f, field: CoefficientField, grid_n: int = 32,
                          name: str | None = None, anchor: str = "ergodic-theorem/volume") -> EnsembleStat:
    """int_0^T f(tau_{X_r/eps} omega) dr against T M[f].

    The z-score tests the ensemble mean of the signed discrepancy; the mean of
    the sup over stored times of |int_0^t f - t M[f]| is kept in ``extra`` for
    the epsilon trend.
    """
    mean_f = torus_mean(as_torus_fn(f), grid_n, field.dim)
    run = _running_volume(field, ens, f, name)
    T = float(ens.times[-1])
    D = run - ens.times[None, :] * mean_f
    est, se = _mean_se(D[:, -1])
    sup = np.abs(D).max(axis=1)
    sup_m, sup_se = _mean_se(sup)
    return EnsembleStat(f"volume:{name or 'f'}", T * mean_f + est, se, T * mean_f, ens.n_paths,
                        ens.eps, ens.dt, "torus quadrature", anchor,
                        {"sup_discrepancy": sup_m, "sup_stderr": sup_se, "T": T,
                         "abs_discrepancy": float(np.abs(D[:, -1]).mean())})


def verify_boundary_average(ens: dy.Ensemble, f, field: CoefficientField, grid_n: int = 32,
                            name: str | None = None,
                            anchor: str = "ergodic-theorem/boundary") -> EnsembleStat:
    """int_0^T f(tau_{X_r/eps} omega) dK_r against M_1[f](omega_1) K_T, path by path."""
    m1 = tangential_mean(as_torus_fn(f), ens.omega[:, 0], grid_n, field.dim)
    run = _running_boundary(field, ens, f, name)
    D = run - np.asarray(m1).reshape(-1, 1) * ens.K
    est, se = _mean_se(D[:, -1])
    sup = np.abs(D).max(axis=1)
    sup_m, sup_se = _mean_se(sup)
    return EnsembleStat(f"boundary:{name or 'f'}", est, se, 0.0, ens.n_paths, ens.eps, ens.dt,
                        "tangential quadrature", anchor,
                        {"sup_discrepancy": sup_m, "sup_stderr": sup_se,
                         "max_abs": float(np.abs(D[:, -1]).max()),
                         "mean_integral": float(run[:, -1].mean()), "mean_K": float(ens.K[:, -1].mean())})


# ---------------------------------------------------------------------------
# invariant measure


def _tangential_nodes(A: float, ntan: int, n: int):
    """Trapezoid nodes/weights on a box in R^n that holds all but ~1e-17 of exp(-2A|y|)."""
    if n == 0:
        return np.zeros((1, 0)), np.ones(1)
    L = 40.0 / (2.0 * A) + 2.0
    y = np.linspace(-L, L, ntan)
    w = np.full(ntan, y[1] - y[0])
    grids = np.meshgrid(*([y] * n), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(np.meshgrid(*([w] * n), indexing="ij"), axis=0).ravel()
    return nodes, weights


def _ipm_quadrature(f, potential: dy.ConfiningPotential, grid_n: int, nlag: int, ntan: int,
                    boundary: bool) -> float:
    A, d = potential.A, potential.dim
    ynodes, yw = _tangential_nodes(A, ntan, d - 1)
    r2 = np.sum(ynodes**2, axis=-1)
    yw = yw * np.exp(-2.0 * A * np.sqrt(1.0 + r2) - 2.0 * potential.c)
    if boundary:
        x1 = np.zeros(1)
        w1 = np.ones(1)
    else:
        r, w = special.roots_laguerre(nlag)
        x1 = r / (2.0 * A)
        w1 = w / (2.0 * A)
    keep = yw > 1e-300
    ynodes, yw = ynodes[keep], yw[keep]
    pts = np.concatenate([np.repeat(x1, len(ynodes))[:, None], np.tile(ynodes, (len(x1), 1))], axis=1)
    wts = np.repeat(w1, len(ynodes)) * np.tile(yw, len(x1))
    # torus average at every spatial node, in batches
    env = torus_grid(grid_n, d).reshape(-1, d)
    total = 0.0
    for s in range(0, len(pts), 512):
        P = pts[s:s + 512]
        vals = f(np.broadcast_to(P[:, None, :], (len(P), len(env), d)),
                 np.broadcast_to(env[None], (len(P), len(env), d)))
        vals = np.asarray(vals, dtype=float)
        if not np.all(np.isfinite(vals)):
            raise QuadratureFail("observable is not finite on the quadrature nodes")
        total += float(np.dot(wts[s:s + 512], vals.mean(axis=1)))
    return total


def invariant_target(f, potential: dy.ConfiningPotential, grid_n: int = 16, boundary: bool = False,
                     rtol: float = 1e-8) -> float:
    """M*_D[f] (or M*_dD[f] with ``boundary=True``): integral of M[f(x, .)] exp(-2V(x)).

    Gauss-Laguerre in x_1, trapezoid in the tangential variables.  The value is
    recomputed at a finer resolution; disagreement beyond ``rtol`` raises.
    """
    d = potential.dim
    if d > 2:
        # the tensor-product tangential grid is too large beyond one tangential axis
        raise QuadratureFail(f"invariant-measure quadrature supports d <= 2, got d = {d}")
    ntan = 401
    coarse = _ipm_quadrature(f, potential, grid_n, 40, ntan, boundary)
    fine = _ipm_quadrature(f, potential, 2 * grid_n, 80, 2 * ntan - 1, boundary)
    if not abs(fine - coarse) <= rtol * max(1.0, abs(fine)):
        raise QuadratureFail(f"quadrature unresolved: {coarse!r} vs {fine!r}")
    return fine


BOUNDARY_NORMALIZATIONS = {"as-stated": 1.0, "occupation": 0.5}


def verify_invariant_measure(field: CoefficientField, potential: dy.ConfiningPotential, fs: dict,
                             eps: float, t_list, N: int, seed: int, *, c: float = 0.1,
                             boundary_fs: dict | None = None, boundary_normalization: str = "as-stated",
                             grid_n: int = 16, workers: int = 1, ensemble: dy.Ensemble | None = None):
    """Stationarity of the drifted ensemble started from exp(-2V) dx x uniform omega.

    Volume rows compare E[f(X_t, env_t)] with M*_D[f].  Boundary rows compare
    E[int_0^t f dK] with s t M*_dD[f], where s = 1 for ``"as-stated"`` and
    s = 1/2 for ``"occupation"`` (K being half the semimartingale local time
    of X_1 when a_11 = 1).  Also returns paired checks that E[K_t]/t does not
    depend on t.
    """
    t_list = sorted(float(t) for t in t_list)
    boundary_fs = {"one": Constant(1.0)} if boundary_fs is None else boundary_fs
    scale = BOUNDARY_NORMALIZATIONS[boundary_normalization]
    if ensemble is None:
        ensemble = dy.simulate_ensemble(field, eps, t_list[-1], N, seed, c=c, start="stationary",
                                        potential=potential, drift=True, store_times=t_list,
                                        boundary_observables=boundary_fs, workers=workers)
    ens = ensemble
    rows: list[EnsembleStat] = []
    for name, f in fs.items():
        target = invariant_target(f, potential, grid_n)
        for t in t_list:
            X, _ = ens.at_time(t)
            vals = f(X, field.phase(ens.omega, X / eps))
            est, se = _mean_se(vals)
            rows.append(EnsembleStat(f"ipm-volume:{name}@t={t:g}", est, se, target, ens.n_paths, eps,
                                     ens.dt, "quadrature", "invariant-measure/volume", {"t": t}))
    j_of = {t: int(np.argmin(np.abs(ens.times - t))) for t in t_list}
    for name, f in boundary_fs.items():
        target = scale * invariant_target(f, potential, grid_n, boundary=True)
        run = ens.boundary_integrals[name]
        for t in t_list:
            est, se = _mean_se(run[:, j_of[t]])
            rows.append(EnsembleStat(f"ipm-boundary:{name}@t={t:g}[{boundary_normalization}]", est, se,
                                     t * target, ens.n_paths, eps, ens.dt, "quadrature",
                                     "invariant-measure/boundary",
                                     {"t": t, "normalization": boundary_normalization, "rate_target": target}))
    K = ens.K
    tl = t_list[-1]
    for t in t_list[:-1]:
        diff = K[:, j_of[t]] / t - K[:, j_of[tl]] / tl
        est, se = _mean_se(diff)
        rows.append(EnsembleStat(f"ipm-rate:K/t@{t:g}-vs-{tl:g}", est, se, 0.0, ens.n_paths, eps, ens.dt,
                                 "exact", "invariant-measure/boundary-linearity", {"t": t}))
    return rows


# ---------------------------------------------------------------------------
# functional CLT


def reflected_cdf(y, var: float):
    """CDF of |N(0, var)|: 2 Phi(y / sqrt(var)) - 1 for y >= 0."""
    y = np.asarray(y, dtype=float)
    return np.where(y > 0, special.erf(np.maximum(y, 0.0) / np.sqrt(2.0 * var)), 0.0)


def _moment_se(u: np.ndarray, v: np.ndarray) -> tuple[float, float]:
    """Sample covariance of u, v and its large-sample standard error."""
    uc, vc = u - u.mean(), v - v.mean()
    p = uc * vc
    return float(p.sum() / (len(u) - 1)), float(p.std(ddof=1) / math.sqrt(len(u)))


def _two_sample(a: tuple[float, float], b: tuple[float, float]) -> float:
    se = math.hypot(a[1], b[1])
    diff = a[0] - b[0]
    if se == 0:
        return 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return diff / se


@dataclass
class CltReport:
    T: float
    eps: list
    rows: list  # one dict per epsilon
    limit: dict
    trend: dict
    A: list
    Gamma: list

    def to_dict(self) -> dict:
        return asdict(self)


def _summary(X: np.ndarray, K: np.ndarray) -> dict:
    d = X.shape[1]
    out = {"mean": [], "var": [], "cov": {}, "K": _mean_se(K)}
    for i in range(d):
        out["mean"].append(_mean_se(X[:, i]))
        out["var"].append(_moment_se(X[:, i], X[:, i]))
    for i in range(d):
        for j in range(i + 1, d):
            out["cov"][f"{i}{j}"] = _moment_se(X[:, i], X[:, j])
    return out


def clt_compare(eps_ensembles: dict, eff, limit: dy.Ensemble, *, Lambda: float | None = None,
                band: float = 0.1, trend_coord: int | None = None) -> CltReport:
    """Compare X^eps_T against the homogenized limit for each epsilon.

    Per epsilon: KS test of X_1 against the reflected Gaussian with variance
    A_11 T (meaningful for starts on the boundary), two-sample z-scores for
    means, variances, covariances and E[K_T] against the limit ensemble, and
    the smallest eigenvalue of Cov(X_T - Gamma K_T) (the free part, whose
    limit covariance is A T) relative to Lambda T.
    """
    A = np.asarray(eff.A, dtype=float)
    G = np.asarray(eff.Gamma, dtype=float)
    d = len(G)
    T = float(limit.times[-1])
    Lambda = eff.Lambda if Lambda is None else Lambda
    j = d - 1 if trend_coord is None else trend_coord
    lim = _summary(limit.final_X, limit.final_K)
    analytic = abs(G[j]) < 1e-12 and j > 0
    target_var = A[j, j] * T if analytic else lim["var"][j][0]
    rows = []
    for eps in sorted(eps_ensembles, reverse=True):
        ens = eps_ensembles[eps]
        if abs(float(ens.times[-1]) - T) > 1e-9 * T:
            raise ValueError("ensembles must share the horizon T")
        X, K = ens.final_X, ens.final_K
        s = _summary(X, K)
        ks = stats.kstest(X[:, 0], lambda y: reflected_cdf(y, A[0, 0] * T))
        free = X - K[:, None] * G[None, :]
        lam_min = float(np.linalg.eigvalsh(np.atleast_2d(np.cov(free.T))).min())
        zs = {f"mean{i}": _two_sample(s["mean"][i], lim["mean"][i]) for i in range(d)}
        zs.update({f"var{i}": _two_sample(s["var"][i], lim["var"][i]) for i in range(d)})
        zs.update({f"cov{k}": _two_sample(v, lim["cov"][k]) for k, v in s["cov"].items()})
        zs["K"] = _two_sample(s["K"], lim["K"])
        rows.append({
            "eps": float(eps), "n": int(ens.n_paths), "dt": float(ens.dt),
            "ks_stat": float(ks.statistic), "ks_pvalue": float(ks.pvalue),
            "summary": s, "z": zs,
            "var_discrepancy": abs(s["var"][j][0] - target_var),
            "var_z_limit": zs[f"var{j}"],
            "free_cov_min_eig": lam_min, "free_cov_floor": Lambda * T * (1 - band),
        })
    disc = [r["var_discrepancy"] for r in rows]
    trend = {
        "coordinate": j,
        "target_var": target_var,
        "target_source": "analytic" if analytic else "limit ensemble",
        "eps": [r["eps"] for r in rows],
        "var_discrepancy": disc,
        "strictly_decreasing": bool(all(b < a for a, b in zip(disc, disc[1:]))),
        "weak": bool(disc[-1] <= disc[0]),
        "max_abs_z": [max(abs(v) for v in r["z"].values()) for r in rows],
    }
    return CltReport(T, [r["eps"] for r in rows], rows, lim, trend, A.tolist(), G.tolist())
