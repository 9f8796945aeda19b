"""Finitely many coalescing diffusions on the circle, and a solvable local model.

Paths are simulated on the lift with Euler-Maruyama steps
``x += b dt + sqrt(a dt) N(0, 1)``, so ``a`` is the quadratic-variation density.
Two paths merge the first time their lift difference crosses an integer;
the lower-index path survives and the other follows it exactly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import stats

__all__ = [
    "StepTooLarge",
    "DomainError",
    "EnsembleBatch",
    "CoalescingEnsemble",
    "max_step",
    "simulate_batch",
    "simulate_ensemble",
    "QuadraticModelParams",
    "analytic_transition_cdf",
    "quadratic_model_cdf",
    "simulate_quadratic_model",
    "log_transform_check",
    "LogTransformReport",
]

MERGE_EPS = 1e-9


class StepTooLarge(ValueError):
    pass


class DomainError(ValueError):
    pass


def max_step(field) -> float:
    """Largest admissible Euler step for ``field``."""
    return min(1e-3, field.a_star / (10.0 * field.b_upper**2 + 1.0))


@dataclass
class EnsembleBatch:
    """Independent ensembles sharing the same starts.

    ``paths`` has shape ``(n_batch, n_starts, n_times)``; ``collision_times``
    is ``(n_batch, n_starts, n_starts)`` with NaN where no collision occurred;
    ``merged_into[b, k]`` is the surviving index that path ``k`` follows, or
    ``k`` itself. ``overshoot[b, j, k]`` is how far the unmerged difference
    ``Z^j - Z^k`` had passed the crossed integer at the merge step.
    """

    starts: np.ndarray
    dt: float
    times: np.ndarray
    paths: np.ndarray
    collision_times: np.ndarray
    merged_into: np.ndarray
    offsets: np.ndarray
    overshoot: np.ndarray = None
    seed: object = None

    def __len__(self):
        return self.paths.shape[0]

    def ensemble(self, i) -> "CoalescingEnsemble":
        return CoalescingEnsemble(
            self.starts,
            self.dt,
            self.times,
            self.paths[i],
            self.collision_times[i],
            self.merged_into[i],
            self.offsets[i],
        )


@dataclass
class CoalescingEnsemble:
    starts: np.ndarray
    dt: float
    times: np.ndarray
    paths: np.ndarray
    collision_times: np.ndarray
    merged_into: np.ndarray
    offsets: np.ndarray

    def collision_time(self, j, k):
        v = self.collision_times[min(j, k), max(j, k)]
        return None if np.isnan(v) else float(v)

    @property
    def coalescence(self):
        """``{(j, k): (T_jk or None, surviving index)}`` for ``j < k``."""
        out = {}
        n = len(self.starts)
        for j in range(n):
            for k in range(j + 1, n):
                T = self.collision_time(j, k)
                out[(j, k)] = (T, j if T is not None else None)
        return out

    def merged_gap(self, k):
        """``(survivor + integer offset) - path_k`` from the merge on; identically 0.0."""
        j = int(self.merged_into[k])
        T = self.collision_time(j, k) if j != k else None
        if T is None:
            return np.zeros(0)
        m = self.times >= T
        return (self.paths[j, m] + self.offsets[k]) - self.paths[k, m]

    def to_csv(self, path, seed=0):
        write_ensemble_csv(path, [(seed, self)])


def write_ensemble_csv(path, ensembles):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["seed", "path_index", "time", "position", "merged_into"])
        for seed, ens in ensembles:
            for k in range(ens.paths.shape[0]):
                for t, x in zip(ens.times, ens.paths[k]):
                    wr.writerow([seed, k, repr(float(t)), repr(float(x)), int(ens.merged_into[k])])


def simulate_batch(field, starts, dt, t_end, n_batch, seed, record_every=1, check_step=True) -> EnsembleBatch:
    """Simulate ``n_batch`` independent coalescing ensembles in lockstep.

    ``starts`` is a sequence of ``(s, x)``. Path ``k`` sits at ``x_k`` until the
    first grid time at or after ``s_k`` and diffuses afterwards. Positions are
    recorded every ``record_every`` steps and at ``t_end``.
    """
    starts = np.asarray(starts, dtype=float).reshape(-1, 2)
    if check_step and dt > max_step(field) * (1 + 1e-12):
        raise StepTooLarge(f"dt={dt:g} exceeds the admissible step {max_step(field):g}")
    s, x0 = starts[:, 0], starts[:, 1]
    K = len(starts)
    t0 = float(np.min(s))
    n_steps = int(np.ceil((t_end - t0) / dt - 1e-9))
    rng = np.random.default_rng(seed)
    X = np.tile(x0, (n_batch, 1))
    master = np.tile(np.arange(K), (n_batch, 1))
    offset = np.zeros((n_batch, K))
    T = np.full((n_batch, K, K), np.nan)
    G = np.full((n_batch, K, K), np.nan)
    rows = np.arange(n_batch)
    rec_t = [t0]
    rec_x = [X.copy()]
    live_prev = s <= t0 + 1e-12
    # simultaneous starts at the same point coalesce at once
    _merge(X, master, offset, T, G, rows, live_prev, live_prev, None, t0)
    t = t0
    for i in range(1, n_steps + 1):
        t_new = t0 + i * dt if i < n_steps else float(t_end)
        h = t_new - t
        live = s <= t + 1e-12
        Z = rng.standard_normal((n_batch, K))
        a = field.a(t, X)
        b = field.b(t, X)
        X_old = X.copy()
        step = b * h + np.sqrt(a * h) * Z
        is_root = master == np.arange(K)
        X = np.where(is_root & live, X + step, X)
        X = np.take_along_axis(X, master, axis=1) + offset
        live_new = s <= t_new + 1e-12
        _merge(X, master, offset, T, G, rows, live, live_new, X_old, t_new)
        t = t_new
        if i % record_every == 0 or i == n_steps:
            rec_t.append(t)
            rec_x.append(X.copy())
    paths = np.stack(rec_x, axis=-1)
    return EnsembleBatch(starts, float(dt), np.array(rec_t), paths, T, master, offset, G, seed)


def _merge(X, master, offset, T, G, rows, live_old, live_new, X_old, t):
    """Detect integer crossings of root differences and merge the larger index."""
    K = X.shape[1]
    for j in range(K):
        for k in range(j + 1, K):
            if not (live_new[j] and live_new[k]):
                continue
            rj, rk = master[:, j], master[:, k]
            cand = (rj == j) & (rk == k)
            if not np.any(cand):
                continue
            D = X[:, j] - X[:, k]
            near = np.abs(D - np.round(D)) < MERGE_EPS
            n = np.round(D)
            hit = near
            if X_old is not None and live_old[j] and live_old[k]:
                D0 = X_old[:, j] - X_old[:, k]
                crossed = np.floor(D0) != np.floor(D)
                n = np.where(near, n, np.where(D < D0, np.floor(D0), np.floor(D)))
                hit = hit | crossed
            hit &= cand
            if not np.any(hit):
                continue
            b = rows[hit]
            nb = n[hit]
            G[b, j, k] = D[hit] - nb
            # every path following k (k included) now follows j
            for f in range(K):
                moving = master[b, f] == k
                if not np.any(moving):
                    continue
                bb = b[moving]
                offset[bb, f] = offset[bb, f] - nb[moving]
                master[bb, f] = j
            # record collision times between the two classes
            for p in range(K):
                for q in range(p + 1, K):
                    pair_in = (master[b, p] == j) & (master[b, q] == j)
                    unset = np.isnan(T[b, p, q])
                    T[b[pair_in & unset], p, q] = t
            X[b] = np.take_along_axis(X[b], master[b], axis=1) + offset[b]


def simulate_ensemble(field, starts, dt, t_end, seed, record_every=1) -> CoalescingEnsemble:
    """One coalescing ensemble; the same as row 0 of :func:`simulate_batch` with this seed."""
    return simulate_batch(field, starts, dt, t_end, 1, seed, record_every).ensemble(0)


# -- quadratic local model -------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticModelParams:
    """Frozen local coefficients ``a``, ``a'``, ``b`` at a base point ``y`` and horizon ``h``.

    The model has diffusivity ``a (1 + a'(x - y)/2a)^2`` and drift
    ``b (1 + a'(x - y)/2a)``.
    """

    a: float
    a_prime: float
    b: float
    h: float
    y: float = 0.0

    def __post_init__(self):
        if self.a <= 0.0 or self.h <= 0.0:
            raise ValueError("a and h must be positive")

    def stretch(self, x):
        return 1.0 + self.a_prime * (np.asarray(x, dtype=float) - self.y) / (2.0 * self.a)

    def diffusivity(self, x):
        return self.a * self.stretch(x) ** 2

    def drift(self, x):
        return self.b * self.stretch(x)

    def transform(self, x):
        """Coordinate in which the model is a Brownian motion with constant drift."""
        u = self.stretch(x)
        if np.any(u <= 0.0):
            raise DomainError("1 + a'(x - y)/(2a) must be positive")
        if self.a_prime == 0.0:
            return (np.asarray(x, dtype=float) - self.y) / np.sqrt(self.a)
        return 2.0 * np.sqrt(self.a) / self.a_prime * np.log(u)

    @property
    def transformed_drift(self):
        return (self.b - self.a_prime / 4.0) / np.sqrt(self.a)


def quadratic_model_cdf(p: QuadraticModelParams, x, z):
    """``P(X_h > z)`` for the model started at ``x``."""
    arg = (p.transform(x) - p.transform(z)) / np.sqrt(p.h) + np.sqrt(p.h) * p.transformed_drift
    return stats.norm.cdf(arg)


def analytic_transition_cdf(p: QuadraticModelParams, x, y=None):
    """``P(X_h(x) > y)`` for the model based at ``y``."""
    if y is not None and y != p.y:
        p = QuadraticModelParams(p.a, p.a_prime, p.b, p.h, float(y))
    return quadratic_model_cdf(p, x, p.y)


def simulate_quadratic_model(p: QuadraticModelParams, x, n_samples, seed, n_steps=1000):
    """Euler-Maruyama samples of ``X_h`` started at ``x``."""
    rng = np.random.default_rng(seed)
    dt = p.h / n_steps
    X = np.full(n_samples, float(x))
    for _ in range(n_steps):
        X = X + p.drift(X) * dt + np.sqrt(p.diffusivity(X) * dt) * rng.standard_normal(n_samples)
    return X


@dataclass
class LogTransformReport:
    mean: float
    mean_target: float
    mean_ci: float
    variance: float
    variance_target: float
    ks: float
    mean_ok: bool
    variance_ok: bool
    ks_ok: bool
    samples: int

    @property
    def ok(self):
        return self.mean_ok and self.variance_ok and self.ks_ok


def log_transform_check(p: QuadraticModelParams, n_samples=100_000, seed=0, x=None, n_steps=1000,
                        variance_tol=0.05, ks_tol=0.01) -> LogTransformReport:
    """Check that the transformed endpoint is Gaussian with the predicted mean and variance ``h``."""
    if p.a_prime == 0.0:
        raise ValueError("the log transform needs a' != 0")
    x = p.y if x is None else float(x)
    X = simulate_quadratic_model(p, x, n_samples, seed, n_steps)
    Y = p.transform(X)
    target = float(p.transform(x) + p.h * p.transformed_drift)
    m = float(Y.mean())
    v = float(Y.var(ddof=1))
    ci = float(2.5758293035489004 * np.sqrt(v / n_samples))
    ks = float(stats.kstest(Y, stats.norm(loc=target, scale=np.sqrt(p.h)).cdf).statistic)
    return LogTransformReport(
        mean=m,
        mean_target=target,
        mean_ci=ci,
        variance=v,
        variance_target=p.h,
        ks=ks,
        mean_ok=abs(m - target) <= ci,
        variance_ok=abs(v - p.h) <= variance_tol * p.h,
        ks_ok=ks < ks_tol,
        samples=int(n_samples),
    )
