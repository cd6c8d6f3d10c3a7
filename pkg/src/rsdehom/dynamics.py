"""Time stepping for the reflected diffusion on the half-space {x_1 > 0}.

One step of the scheme, for a state X in the closed half-space:

    Xp = X + eps^-1 b(env) dt + sigma(env) sqrt(dt) g  [- a(env) grad V(X) dt]
    if Xp_1 < 0:  dK = -Xp_1,  X' = Xp + gamma(env at boundary projection) dK

with env = tau_{X/eps} omega.  Because gamma_1 = a_11 = 1, a single push
lands exactly on the boundary.  The ensemble engine advances many paths at
once; each path draws its Gaussians from its own stream (see ``seeding``),
so results do not depend on batching or worker count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy import integrate, special

from .errors import BadEffective, NonFinite, RejectionStall
from .medium import CoefficientField, sqrtm_spd
from .seeding import StreamDescriptor, seed_plan

BLOCK = 256  # Gaussian draws per stream request
CHUNK = 2048  # paths per work unit


@dataclass(frozen=True)
class SimConfig:
    eps: float
    T: float
    x0: np.ndarray
    omega: np.ndarray
    c: float = 0.1
    dt: float | None = None
    stream: int = 0

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")
        x0 = np.asarray(self.x0, dtype=float)
        if x0[0] < 0:
            raise ValueError("starting point must lie in the closed half-space")
        if self.nominal_dt > self.T:
            raise ValueError("time step exceeds horizon")

    @property
    def nominal_dt(self) -> float:
        return self.dt if self.dt is not None else self.c * self.eps**2

    @property
    def n_steps(self) -> int:
        return step_count(self.T, self.nominal_dt)

    @property
    def h(self) -> float:
        return self.T / self.n_steps


def step_count(T: float, dt: float) -> int:
    # tolerate T/dt landing a hair above an integer
    return max(1, math.ceil(T / dt - 1e-9))


@dataclass
class ReflectedPath:
    times: np.ndarray
    X: np.ndarray
    K: np.ndarray
    increments: np.ndarray | None = None

    @property
    def dK(self) -> np.ndarray:
        return np.diff(self.K)

    def dump_csv(self, path: str | Path) -> None:
        d = self.X.shape[-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{i + 1}" for i in range(d)] + ["K"])
            for t, x, k in zip(self.times, self.X, self.K):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(k))])

    @classmethod
    def load_csv(cls, path: str | Path) -> "ReflectedPath":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(times=data[:, 0], X=data[:, 1:-1], K=data[:, -1])


@dataclass
class Ensemble:
    """Stored snapshots of many paths: X has shape (n_paths, n_times, d)."""

    times: np.ndarray
    X: np.ndarray
    K: np.ndarray
    omega: np.ndarray
    eps: float
    dt: float
    seed: int
    kind: str = "rsde"
    meta: dict = dc_field(default_factory=dict)
    integrals: dict = dc_field(default_factory=dict)  # name -> (n_paths, n_times) running int f dt
    boundary_integrals: dict = dc_field(default_factory=dict)  # name -> running int f dK

    @property
    def full_resolution(self) -> bool:
        return len(self.times) == self.meta.get("n_steps", -1) + 1

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def x0(self) -> np.ndarray:
        return self.X[:, 0]

    @property
    def final_X(self) -> np.ndarray:
        return self.X[:, -1]

    @property
    def final_K(self) -> np.ndarray:
        return self.K[:, -1]

    def path(self, i: int) -> ReflectedPath:
        return ReflectedPath(self.times.copy(), self.X[i].copy(), self.K[i].copy())

    def at_time(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        j = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[j] - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"time {t} is not a stored snapshot")
        return self.X[:, j], self.K[:, j]


@dataclass(frozen=True)
class ConfiningPotential:
    """V(x) = A x_1 + A sqrt(1 + |x_tan|^2) + c, normalized so exp(-2V) is a density."""

    A: float
    dim: int
    c: float = dc_field(init=False)

    def __post_init__(self):
        if not self.A > 0:
            raise ValueError("slope A must be positive")
        # exp(-2c) * Z / (2A) = 1
        object.__setattr__(self, "c", 0.5 * math.log(tangential_mass(self.A, self.dim) / (2 * self.A)))

    def V(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x[..., 1:] ** 2, axis=-1)
        return self.A * x[..., 0] + self.A * np.sqrt(1.0 + r2) + self.c

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        out[..., 0] = self.A
        r = np.sqrt(1.0 + np.sum(x[..., 1:] ** 2, axis=-1))
        out[..., 1:] = self.A * x[..., 1:] / r[..., None]
        return out

    def density(self, x) -> np.ndarray:
        return np.exp(-2.0 * self.V(x))

    @property
    def boundary_mass(self) -> float:
        """Integral of exp(-2V) over the boundary hyperplane."""
        return math.exp(-2.0 * self.c) * tangential_mass(self.A, self.dim)

    @property
    def mean_x1(self) -> float:
        return 1.0 / (2.0 * self.A)


def tangential_mass(A: float, dim: int) -> float:
    """Z = integral over R^(dim-1) of exp(-2A sqrt(1+|y|^2)) dy."""
    n = dim - 1
    if n == 0:
        return math.exp(-2.0 * A)
    if n == 1:
        return 2.0 * special.k1(2.0 * A)
    area = 2.0 * math.pi ** (n / 2) / math.gamma(n / 2)
    val, _ = integrate.quad(lambda r: r ** (n - 1) * math.exp(-2 * A * math.sqrt(1 + r * r)), 0, np.inf)
    return area * val


def proposal_acceptance(A: float, dim: int) -> float:
    """Acceptance rate of the radial-Laplace proposal used by ``sample_initial``."""
    n = dim - 1
    if n == 0:
        return 1.0
    area = 2.0 * math.pi ** (n / 2) / math.gamma(n / 2)
    proposal_mass = area * math.gamma(n) / (2 * A) ** n
    return tangential_mass(A, dim) / proposal_mass


def sample_initial(potential: ConfiningPotential, rng: np.random.Generator,
                   max_tries: int = 100_000):
    """Draw one point from the density exp(-2V) on the closed half-space.

    The normal coordinate is exponential with rate 2A.  Tangential coordinates
    are proposed from the radial Laplace density exp(-2A|y|) (radius
    ~ Gamma(d-1, 1/(2A)), uniform direction) and accepted with probability
    exp(-2A (sqrt(1+r^2) - r)) <= 1.
    """
    A, d = potential.A, potential.dim
    x = np.empty(d)
    x[0] = rng.exponential(1.0 / (2.0 * A))
    n = d - 1
    if n == 0:
        return x
    for _ in range(max_tries):
        r = rng.gamma(n, 1.0 / (2.0 * A))
        u = rng.uniform()
        if u <= math.exp(-2.0 * A * (math.sqrt(1.0 + r * r) - r)):
            if n == 1:
                direction = np.array([1.0 if rng.uniform() < 0.5 else -1.0])
            else:
                v = rng.standard_normal(n)
                direction = v / np.linalg.norm(v)
            x[1:] = r * direction
            return x
    raise RejectionStall(
        f"no acceptance in {max_tries} proposals (expected rate {proposal_acceptance(A, d):.2e})"
    )


# ---------------------------------------------------------------------------
# the scheme


def _advance(field: CoefficientField, eps: float, h: float, X: np.ndarray, omega: np.ndarray,
             g: np.ndarray, potential: ConfiningPotential | None = None):
    """One step for a batch; returns (X', dK, environment at X)."""
    env = field.phase(omega, X / eps)
    a, b = field.local(env)
    sig = sqrtm_spd(a)
    Xp = X + (h / eps) * b + math.sqrt(h) * np.einsum("nij,nj->ni", sig, g)
    if potential is not None:
        Xp -= h * np.einsum("nij,nj->ni", a, potential.grad(X))
    dK = np.zeros(len(X))
    idx = np.flatnonzero(Xp[:, 0] < 0.0)
    if idx.size:
        push = -Xp[idx, 0]
        foot = Xp[idx].copy()
        foot[:, 0] = 0.0
        om = omega if omega.ndim == 1 else omega[idx]
        gam = field.gamma_at(field.phase(om, foot / eps))
        Xp[idx] += gam * push[:, None]
        dK[idx] = push
    return Xp, dK, env


def step_reflected(X, K, field: CoefficientField, cfg: SimConfig, gaussian,
                   potential: ConfiningPotential | None = None):
    """Advance one step of size ``cfg.h``; returns (X', K')."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    Xb = np.atleast_2d(X)
    g = np.atleast_2d(np.asarray(gaussian, dtype=float))
    Xn, dK, _ = _advance(field, cfg.eps, cfg.h, Xb, np.asarray(cfg.omega, dtype=float), g, potential)
    if not np.all(np.isfinite(Xn)):
        raise NonFinite("non-finite state after step; reduce dt relative to eps^2")
    Kn = np.asarray(K, dtype=float) + (dK[0] if single else dK)
    return (Xn[0], Kn) if single else (Xn, Kn)


def _run(field, eps, h, n_steps, X0, omega, noise, potential, store_steps, keep_noise=False,
         volume_fns=(), boundary_fns=()):
    """Shared loop. ``noise(s, nb)`` returns Gaussians for steps [s, s+nb), shape (N, nb, d).

    ``store_steps`` lists the step indices (0 included) whose states are kept.
    Observables f(x, env) are integrated along the way: volume ones against
    dt (left endpoints), boundary ones against dK at the post-push state.
    """
    N, d = X0.shape
    keep = np.zeros(n_steps + 1, dtype=bool)
    keep[np.asarray(store_steps, dtype=int)] = True
    keep[0] = True
    n_store = int(keep.sum())
    Xs = np.empty((N, n_store, d))
    Ks = np.zeros((N, n_store))
    nv, nb_ = len(volume_fns), len(boundary_fns)
    Vs = np.zeros((N, n_store, nv))
    Bs = np.zeros((N, n_store, nb_))
    vol = np.zeros((N, nv))
    bnd = np.zeros((N, nb_))
    Xs[:, 0] = X0
    X = X0.copy()
    K = np.zeros(N)
    kept = np.empty((N, n_steps, d)) if keep_noise else None
    j = 1
    for s0 in range(0, n_steps, BLOCK):
        nb = min(BLOCK, n_steps - s0)
        G = noise(s0, nb)
        if keep_noise:
            kept[:, s0:s0 + nb] = G
        for s in range(nb):
            Xn, dK, env = _advance(field, eps, h, X, omega, G[:, s], potential)
            for m, f in enumerate(volume_fns):
                vol[:, m] += h * f(X, env)
            if nb_:
                idx = np.flatnonzero(dK > 0)
                if idx.size:
                    om = omega if omega.ndim == 1 else omega[idx]
                    envb = field.phase(om, Xn[idx] / eps)
                    for m, f in enumerate(boundary_fns):
                        bnd[idx, m] += f(Xn[idx], envb) * dK[idx]
            X = Xn
            K += dK
            if keep[s0 + s + 1]:
                Xs[:, j] = X
                Ks[:, j] = K
                Vs[:, j] = vol
                Bs[:, j] = bnd
                j += 1
        if not np.all(np.isfinite(X)):
            raise NonFinite(f"non-finite state before step {s0 + nb} (eps={eps}, dt={h})")
    return Xs, Ks, kept, Vs, Bs


def _stream_noise(gens, d):
    def noise(s0, nb):
        return np.stack([g.standard_normal((nb, d)) for g in gens])
    return noise


def _array_noise(increments):
    inc = np.asarray(increments, dtype=float)
    if inc.ndim == 2:
        inc = inc[None]

    def noise(s0, nb):
        return inc[:, s0:s0 + nb]
    return noise


def simulate_path(cfg: SimConfig, field: CoefficientField, rng_stream: StreamDescriptor | None = None,
                  potential: ConfiningPotential | None = None, increments=None,
                  keep_increments: bool = False) -> ReflectedPath:
    """Single path of the scheme, a deterministic function of (cfg, field, stream).

    Pass ``increments`` (shape (n_steps, d)) to drive the path with given
    standard Gaussians instead of a stream.
    """
    d = field.dim
    X0 = np.asarray(cfg.x0, dtype=float).reshape(1, d)
    omega = np.asarray(cfg.omega, dtype=float).reshape(d)
    if increments is not None:
        noise = _array_noise(increments)
    else:
        stream = rng_stream or StreamDescriptor(0, cfg.stream)
        noise = _stream_noise([stream.noise()], d)
    n = cfg.n_steps
    Xs, Ks, kept, _, _ = _run(field, cfg.eps, cfg.h, n, X0, omega, noise, potential,
                              np.arange(n + 1), keep_noise=keep_increments)
    times = cfg.h * np.arange(n + 1)
    return ReflectedPath(times, Xs[0], Ks[0], None if kept is None else kept[0])


def simulate_drifted_path(cfg: SimConfig, field: CoefficientField, potential: ConfiningPotential,
                          rng_stream: StreamDescriptor | None = None, increments=None) -> ReflectedPath:
    """Path of the scheme with the additional confining drift -a grad V."""
    return simulate_path(cfg, field, rng_stream, potential=potential, increments=increments)


def _initial_conditions(streams, d, x0, omega, start, potential):
    N = len(streams)
    om = np.empty((N, d))
    xs = np.empty((N, d))
    for n, st in enumerate(streams):
        g = st.initial()
        om[n] = g.uniform(size=d) if omega is None else omega
        if start == "stationary":
            xs[n] = sample_initial(potential, g)
        else:
            xs[n] = x0
    return om, xs


def _simulate_chunk(args):
    (field, eps, h, n_steps, master, first, count, x0, omega, start, potential, drift,
     store_steps, volume_fns, boundary_fns) = args
    streams = seed_plan(master, count, start=first)
    om, X0 = _initial_conditions(streams, field.dim, x0, omega, start, potential)
    noise = _stream_noise([s.noise() for s in streams], field.dim)
    Xs, Ks, _, Vs, Bs = _run(field, eps, h, n_steps, X0, om, noise, potential if drift else None,
                             store_steps, volume_fns=volume_fns, boundary_fns=boundary_fns)
    return om, Xs, Ks, Vs, Bs


def store_plan(T: float, h: float, n_steps: int, store_every: int | None = None,
               store_times=None) -> np.ndarray:
    """Step indices to keep: every ``store_every`` steps, or the given times."""
    if store_times is not None:
        t = np.asarray(store_times, dtype=float)
        steps = np.rint(t / h).astype(int)
        if np.any(np.abs(steps * h - t) > 1e-9 * max(1.0, T)) or np.any(steps > n_steps) or np.any(steps < 0):
            raise ValueError(f"store times {t.tolist()} are not on the step grid h={h}")
        return np.unique(np.concatenate([[0], steps]))
    every = 1 if store_every is None else int(store_every)
    if every < 1 or n_steps % every:
        raise ValueError(f"store_every={every} does not divide n_steps={n_steps}")
    return np.arange(0, n_steps + 1, every)


def simulate_ensemble(field: CoefficientField, eps: float, T: float, n_paths: int, seed: int, *,
                      c: float = 0.1, dt: float | None = None, x0=None, omega=None,
                      start: str = "fixed", potential: ConfiningPotential | None = None,
                      drift: bool = False, store_every: int | None = None, store_times=None,
                      observables: dict | None = None, boundary_observables: dict | None = None,
                      workers: int = 1) -> Ensemble:
    """Simulate ``n_paths`` independent paths.

    ``omega=None`` draws a uniform environment per path (annealed); a single
    point fixes it for all paths (quenched).  ``start="stationary"`` draws the
    starting point from exp(-2V) of ``potential``; otherwise ``x0`` (default the
    origin) is used.  ``drift=True`` adds the confining drift.

    ``observables`` / ``boundary_observables`` map names to functions f(x, env)
    whose running integrals against dt / dK are stored at the snapshot times.
    They must be picklable when ``workers > 1``.
    """
    d = field.dim
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    h_nom = dt if dt is not None else c * eps**2
    n_steps = step_count(T, h_nom)
    h = T / n_steps
    steps = store_plan(T, h, n_steps, store_every, store_times)
    if (start == "stationary" or drift) and potential is None:
        raise ValueError("a potential is required for stationary starts or drifted paths")
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float)
    if x0[0] < 0:
        raise ValueError("starting point must lie in the closed half-space")
    omega = None if omega is None else np.asarray(omega, dtype=float)
    vnames = list(observables or {})
    bnames = list(boundary_observables or {})
    vfns = tuple((observables or {})[k] for k in vnames)
    bfns = tuple((boundary_observables or {})[k] for k in bnames)
    jobs = [
        (field, eps, h, n_steps, seed, first, min(CHUNK, n_paths - first), x0, omega, start,
         potential, drift, steps, vfns, bfns)
        for first in range(0, n_paths, CHUNK)
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_simulate_chunk, jobs))
    else:
        parts = [_simulate_chunk(j) for j in jobs]
    om, Xs, Ks, Vs, Bs = (np.concatenate([p[i] for p in parts]) for i in range(5))
    kind = "drifted" if drift else "rsde"
    meta = {"start": start, "T": T, "c": c if dt is None else None, "n_steps": n_steps,
            "quenched": omega is not None}
    integrals = {k: Vs[:, :, m] for m, k in enumerate(vnames)}
    b_integrals = {k: Bs[:, :, m] for m, k in enumerate(bnames)}
    return Ensemble(h * steps, Xs, Ks, om, eps, h, seed, kind, meta, integrals, b_integrals)


# ---------------------------------------------------------------------------
# homogenized limit


def _limit_parts(eff):
    A = np.asarray(eff.A, dtype=float)
    G = np.asarray(eff.Gamma, dtype=float)
    if not G[0] > 0:
        raise BadEffective(f"Gamma_1 = {G[0]} must be positive")
    if np.linalg.eigvalsh(0.5 * (A + A.T)).min() <= 0:
        raise BadEffective("effective matrix is not positive definite")
    return sqrtm_spd(0.5 * (A + A.T)), G


def _limit_run(root, G, h, n_steps, X0, noise, store_every):
    N, d = X0.shape
    n_store = n_steps // store_every + 1
    Xs = np.empty((N, n_store, d))
    Ks = np.zeros((N, n_store))
    Xs[:, 0] = X0
    W = X0.copy()
    push = np.zeros(N)  # running max(0, sup -W_1)
    j = 1
    sq = math.sqrt(h)
    for s0 in range(0, n_steps, BLOCK):
        nb = min(BLOCK, n_steps - s0)
        Gn = noise(s0, nb)
        for s in range(nb):
            W = W + sq * Gn[:, s] @ root.T
            push = np.maximum(push, -W[:, 0])
            if (s0 + s + 1) % store_every == 0:
                Kbar = push / G[0]
                Xs[:, j] = W + G[None, :] * Kbar[:, None]
                Xs[:, j, 0] = W[:, 0] + push
                Ks[:, j] = Kbar
                j += 1
    return Xs, Ks


def simulate_limit_path(eff, T: float, dt: float, x, rng_stream: StreamDescriptor | None = None,
                        increments=None) -> ReflectedPath:
    """Path of the constant-coefficient limit X = x + A^1/2 B + Gamma K.

    The pushing is the running Skorokhod map of the first coordinate,
    Gamma_1 K_t = max(0, sup_{s<=t} -W_1(s)), so X_1 >= 0 exactly.
    """
    root, G = _limit_parts(eff)
    d = len(G)
    n_steps = step_count(T, dt)
    h = T / n_steps
    X0 = np.asarray(x, dtype=float).reshape(1, d)
    if increments is not None:
        noise = _array_noise(increments)
    else:
        noise = _stream_noise([(rng_stream or StreamDescriptor(0, 0)).noise()], d)
    Xs, Ks = _limit_run(root, G, h, n_steps, X0, noise, 1)
    return ReflectedPath(h * np.arange(n_steps + 1), Xs[0], Ks[0])


def simulate_limit_ensemble(eff, T: float, dt: float, n_paths: int, seed: int, *, x0=None,
                            start: str = "fixed", potential: ConfiningPotential | None = None,
                            store_every: int | None = None) -> Ensemble:
    root, G = _limit_parts(eff)
    d = len(G)
    n_steps = step_count(T, dt)
    h = T / n_steps
    store_every = n_steps if store_every is None else store_every
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float)
    om_parts, X_parts, K_parts = [], [], []
    for first in range(0, n_paths, CHUNK):
        streams = seed_plan(seed, min(CHUNK, n_paths - first), start=first)
        om, X0 = _initial_conditions(streams, d, x0, np.zeros(d), start, potential)
        Xs, Ks = _limit_run(root, G, h, n_steps, X0, _stream_noise([s.noise() for s in streams], d),
                            store_every)
        om_parts.append(om)
        X_parts.append(Xs)
        K_parts.append(Ks)
    Xs = np.concatenate(X_parts)
    times = h * store_every * np.arange(Xs.shape[1])
    return Ensemble(times, Xs, np.concatenate(K_parts), np.concatenate(om_parts), 0.0, h, seed,
                    "limit", {"start": start, "T": T, "n_steps": n_steps})


# ---------------------------------------------------------------------------


def occupation_local_time(path, delta: float):
    """delta^-1 * sum_i dt 1[0 <= X_1(t_i) <= delta] over the left endpoints.

    Accepts a ``ReflectedPath`` (scalar result) or an ``Ensemble`` stored at
    every step (one value per path).
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    x1 = path.X[..., :-1, 0]
    dt = np.diff(path.times)
    inside = (x1 >= 0.0) & (x1 <= delta)
    out = (inside * dt).sum(axis=-1) / delta
    return float(out) if np.ndim(out) == 0 else out
