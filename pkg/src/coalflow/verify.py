"""Statistical checks: martingale residuals, cross products, KS, path marginals and reversal."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from functools import partial
from typing import List

import numpy as np
from scipy import stats

from .coalescing_sde import EnsembleBatch, simulate_batch
from .disturbance import (
    check_regime,
    disturbance_endpoints,
    disturbance_parameters,
    flow_seed,
    forward_displacement,
    inverse_displacement,
    padded_events,
)
from .parallel import map_blocks, seed_blocks

__all__ = [
    "InsufficientSamples",
    "ZScoreReport",
    "CrossProductReport",
    "KSResult",
    "ConvergenceReport",
    "DriftBin",
    "DriftTable",
    "martingale_residual_test",
    "cross_product_test",
    "ks_two_sample",
    "single_path_convergence_test",
    "reversal_drift_experiment",
    "slot_increments",
]

Z_THRESHOLD = 4.0
# realised covariation over n steps has relative sd ~ sqrt(2 / n); 1e4 steps
# puts the 5% post-collision tolerance at about 3.5 standard deviations
MIN_POST_STEPS = 10_000


class InsufficientSamples(ValueError):
    pass


def _trapz(y, t):
    return np.sum(0.5 * (y[..., 1:] + y[..., :-1]) * np.diff(t), axis=-1)


def _window_edges(n_times, window_count):
    edges = np.linspace(0, n_times - 1, window_count + 1).round().astype(int)
    return np.unique(edges)


@dataclass
class ZScoreReport:
    z: np.ndarray
    threshold: float = Z_THRESHOLD
    n: int = 0

    @property
    def max_abs_z(self):
        return float(np.max(np.abs(self.z))) if self.z.size else 0.0

    @property
    def ok(self):
        return self.max_abs_z < self.threshold


def _zscores(values):
    """CLT z-score of the mean of each column."""
    m = values.mean(axis=0)
    se = values.std(axis=0, ddof=1) / np.sqrt(values.shape[0])
    return np.where(se > 0, m / np.where(se > 0, se, 1.0), 0.0)


def martingale_residual_test(paths, field, window_count=10, times=None, start_index=0) -> ZScoreReport:
    """Mean of ``dZ - int b(r, Z_r) dr`` per time window, as CLT z-scores.

    ``paths`` is an :class:`EnsembleBatch` (path ``start_index`` is used) or
    an ``(n_paths, n_times)`` array together with ``times``.
    """
    if isinstance(paths, EnsembleBatch):
        times = paths.times
        Z = paths.paths[:, start_index, :]
    else:
        Z = np.asarray(paths, dtype=float)
        if Z.ndim != 2 or times is None:
            raise ValueError("pass an (n_paths, n_times) array and its times")
        times = np.asarray(times, dtype=float)
    if Z.shape[0] < 1000:
        raise InsufficientSamples(f"need at least 1000 paths, got {Z.shape[0]}")
    B = field.b(times[None, :], Z)
    edges = _window_edges(len(times), window_count)
    cols = []
    for i0, i1 in zip(edges[:-1], edges[1:]):
        cols.append(Z[:, i1] - Z[:, i0] - _trapz(B[:, i0 : i1 + 1], times[i0 : i1 + 1]))
    return ZScoreReport(_zscores(np.column_stack(cols)), n=Z.shape[0])


@dataclass
class CrossProductReport:
    z_compensated: np.ndarray
    z_uncompensated: np.ndarray
    pre_rate: float
    pre_rate_ci: float
    post_rate: float
    post_a: float
    post_samples: int
    post_steps: int = 0
    threshold: float = Z_THRESHOLD

    @property
    def max_abs_z(self):
        return float(np.max(np.abs(self.z_compensated)))

    @property
    def pre_ok(self):
        return abs(self.pre_rate) <= self.pre_rate_ci

    @property
    def post_ok(self):
        if self.post_steps < MIN_POST_STEPS:
            return True  # too little post-collision time to assess
        return abs(self.post_rate - self.post_a) <= 0.05 * abs(self.post_a)

    @property
    def ok(self):
        return self.max_abs_z < self.threshold and self.pre_ok and self.post_ok


def cross_product_test(ensemble: EnsembleBatch, field, j=0, k=1, window_count=10) -> CrossProductReport:
    """Check the product martingale of two paths and their covariation.

    For each time window the compensated increment of ``Z^j Z^k`` is
    ``d(Z^j Z^k) - int (Z^j b(Z^k) + Z^k b(Z^j)) dr - int_{window, r >= T} a(Z^j) dr``
    and its mean over seeds should vanish. The realised covariation of the
    two drift-compensated paths before the collision time is compared with 0
    (99% interval), and after the collision with the mean of ``int a``.
    """
    n = len(ensemble)
    if n < 1000:
        raise InsufficientSamples(f"need at least 1000 ensembles, got {n}")
    t = ensemble.times
    Zj = ensemble.paths[:, j, :]
    Zk = ensemble.paths[:, k, :]
    T = ensemble.collision_times[:, min(j, k), max(j, k)]
    T = np.where(np.isnan(T), np.inf, T)
    bj = field.b(t[None, :], Zj)
    bk = field.b(t[None, :], Zk)
    aj = field.a(t[None, :], Zj)
    after = t[None, :] >= T[:, None]
    P = Zj * Zk
    edges = _window_edges(len(t), window_count)
    comp, uncomp = [], []
    for i0, i1 in zip(edges[:-1], edges[1:]):
        sl = slice(i0, i1 + 1)
        dP = P[:, i1] - P[:, i0]
        drift = _trapz(Zj[:, sl] * bk[:, sl] + Zk[:, sl] * bj[:, sl], t[sl])
        qv = _trapz(aj[:, sl] * after[:, sl], t[sl])
        comp.append(dP - drift - qv)
        uncomp.append(dP - drift)
    # step increments of the drift-compensated paths
    dt = np.diff(t)
    Mj = np.diff(Zj, axis=1) - 0.5 * (bj[:, 1:] + bj[:, :-1]) * dt
    Mk = np.diff(Zk, axis=1) - 0.5 * (bk[:, 1:] + bk[:, :-1]) * dt
    # undo the merge snap on the collision step so the stopped sum is a martingale
    G = ensemble.overshoot[:, min(j, k), max(j, k)]
    hit_step = t[None, 1:] == T[:, None]
    eps = np.where(np.isnan(G), 0.0, G)[:, None] * hit_step
    if k > j:
        Mk = Mk - eps
    else:
        Mj = Mj - eps
    step_before = t[None, 1:] <= T[:, None]
    step_after = t[None, :-1] >= T[:, None]
    span = t[-1] - t[0]
    pre = np.sum(Mj * Mk * step_before, axis=1) / span
    pre_rate = float(pre.mean())
    pre_ci = float(2.5758293035489004 * pre.std(ddof=1) / np.sqrt(n))
    has_post = np.any(step_after, axis=1)
    if np.any(has_post):
        post_cov = np.sum((Mj * Mk * step_after)[has_post], axis=1)
        a_mid = 0.5 * (aj[:, 1:] + aj[:, :-1])
        post_int = np.sum((a_mid * dt * step_after)[has_post], axis=1)
        post_len = np.sum((dt * step_after)[has_post], axis=1).sum()
        post_rate = float(post_cov.sum() / post_len)
        post_a = float(post_int.sum() / post_len)
    else:
        post_rate = post_a = float("nan")
    return CrossProductReport(
        z_compensated=_zscores(np.column_stack(comp)),
        z_uncompensated=_zscores(np.column_stack(uncomp)),
        pre_rate=pre_rate,
        pre_rate_ci=pre_ci,
        post_rate=post_rate,
        post_a=post_a,
        post_samples=int(np.sum(has_post)),
        post_steps=int(np.sum(step_after)),
    )


@dataclass
class KSResult:
    statistic: float
    pvalue: float


def ks_two_sample(sample_a, sample_b) -> KSResult:
    """Two-sample Kolmogorov-Smirnov statistic with the asymptotic p-value."""
    a = np.asarray(sample_a, dtype=float).ravel()
    b = np.asarray(sample_b, dtype=float).ravel()
    if a.size < 1000 or b.size < 1000:
        raise InsufficientSamples("both samples need at least 1000 points")
    res = stats.ks_2samp(a, b, method="asymp")
    return KSResult(float(res.statistic), float(res.pvalue))


# -- path marginals -------------------------------------------------------------------


@dataclass
class ConvergenceReport:
    hs: List[float]
    ks: List[float]
    pvalues: List[float]
    n_seeds: int
    t: float
    start: tuple

    @property
    def decreasing(self):
        order = np.argsort(self.hs)[::-1]
        ks = np.asarray(self.ks)[order]
        return bool(np.all(np.diff(ks) < 0))

    def as_rows(self):
        return [(h, k, p) for h, k, p in zip(self.hs, self.ks, self.pvalues)]


def _endpoint_block(bounds, field, h, window, x0, root):
    i0, i1 = bounds
    return disturbance_endpoints(field, h, window, x0, [flow_seed(root, i) for i in range(i0, i1)])


def disturbance_marginal(field, h, e, t, n_seeds, seed=0, jobs=1, block=500):
    s, x = float(e[0]), float(e[1])
    fn = partial(_endpoint_block, field=field, h=h, window=(s, float(t)), x0=x, root=seed)
    return np.concatenate(map_blocks(fn, seed_blocks(n_seeds, block), jobs))


def single_path_convergence_test(field, h, e, t, n_seeds, seed=0, dt=1e-4, jobs=1) -> ConvergenceReport:
    """KS distance between disturbance-flow and Euler marginals at time ``t`` for each ``h``.

    ``h`` is a scalar or a ladder. The same Euler reference sample is used for
    every rung, and each rung uses the same seed family.
    """
    hs = [float(v) for v in np.atleast_1d(h)]
    s = float(e[0])
    ref = simulate_batch(field, [e], dt, t, n_seeds, np.random.SeedSequence([int(seed), 2]),
                         record_every=10**12).paths[:, 0, -1]
    ks, pv = [], []
    for hv in hs:
        sample = disturbance_marginal(field, hv, e, t, n_seeds, seed, jobs)
        r = ks_two_sample(sample, ref)
        ks.append(r.statistic)
        pv.append(r.pvalue)
    return ConvergenceReport(hs, ks, pv, int(n_seeds), float(t), (s, float(e[1])))


# -- reversal experiment ----------------------------------------------------------------


def slot_increments(field, h, window, seeds, delta, x_starts, reverse=True, collapse_only=False):
    """Increments over consecutive slots of length ``delta`` for a block of flows.

    For ``reverse=True`` the slots live on the reversed window
    ``(-t1, -t0]`` and the paths follow the time-reversed flow, applying
    ``F^-1`` of the original events in decreasing original time. Each slot
    starts fresh at every point of ``x_starts``. Returns an array of shape
    ``(n_flows, n_slots, n_x)`` and the slot start times.
    """
    t0, t1 = float(window[0]), float(window[1])
    H = h ** (1.0 / 3.0)
    times, thetas, w, r, counts = padded_events(field, h, window, seeds, collapse_only)
    n_flows = len(seeds)
    n_slots = int(round((t1 - t0) / delta))
    if reverse:
        u = -times[:, ::-1]
        thetas, w, r = thetas[:, ::-1], w[:, ::-1], r[:, ::-1]
        u0 = -t1
        disp = inverse_displacement
    else:
        u = times
        u0 = t0
        disp = forward_displacement
    valid = np.isfinite(u)
    slot = np.where(valid, np.floor((u - u0) / delta), -1).astype(int)
    slot = np.where(slot >= n_slots, n_slots - 1, slot)
    # rank of each event inside its slot; events are sorted in the slot's time order
    rank = np.zeros_like(slot)
    for i in range(n_flows):
        sv = slot[i][valid[i]]
        if sv.size:
            first = np.searchsorted(sv, sv, side="left")
            rank[i, valid[i]] = np.arange(sv.size) - first
    R = int(rank.max()) + 1 if valid.any() else 0
    shape = (n_flows, n_slots, R)
    TH = np.zeros(shape)
    W = np.zeros(shape)
    RR = np.zeros(shape)
    fi, ei = np.nonzero(valid)
    TH[fi, slot[fi, ei], rank[fi, ei]] = thetas[fi, ei]
    W[fi, slot[fi, ei], rank[fi, ei]] = w[fi, ei]
    RR[fi, slot[fi, ei], rank[fi, ei]] = r[fi, ei]
    x_starts = np.asarray(x_starts, dtype=float)
    X = np.broadcast_to(x_starts, (n_flows, n_slots, x_starts.size)).copy()
    for k in range(R):
        X += disp(X, TH[:, :, k, None], W[:, :, k, None], RR[:, :, k, None], H)
    slot_starts = u0 + delta * np.arange(n_slots)
    return X - x_starts, slot_starts


def _power_sums(bounds, field, h, window, delta, x_starts, reverse, collapse_only, root, n_t):
    i0, i1 = bounds
    inc, starts = slot_increments(
        field, h, window, [flow_seed(root, i) for i in range(i0, i1)], delta, x_starts, reverse, collapse_only
    )
    u0 = starts[0]
    span = starts[-1] + delta - u0
    tbin = np.minimum(((starts - u0) / span * n_t).astype(int), n_t - 1)
    out = np.zeros((5, n_t, len(x_starts)))
    for b in range(n_t):
        v = inc[:, tbin == b, :].reshape(-1, len(x_starts))
        for p in range(5):
            out[p, b] = np.sum(v**p, axis=0)
    return out


@dataclass
class DriftBin:
    t_center: float
    x_center: float
    n: int
    drift_rate: float
    drift_target: float
    var_rate: float
    var_target: float
    ci_radius: float
    var_ci_radius: float
    drift_tol: float
    var_tol: float

    @property
    def drift_ok(self):
        return abs(self.drift_rate - self.drift_target) <= self.drift_tol

    @property
    def var_ok(self):
        return abs(self.var_rate - self.var_target) <= self.var_tol

    @property
    def passed(self):
        return self.drift_ok and self.var_ok


@dataclass
class DriftTable:
    delta: float
    h: float
    bins: List[DriftBin] = dc_field(default_factory=list)

    CSV_FIELDS = (
        "t_center",
        "x_center",
        "n",
        "drift_rate",
        "drift_target",
        "var_rate",
        "var_target",
        "ci_radius",
        "pass",
    )

    @property
    def passed(self):
        return all(b.passed for b in self.bins)

    def failing(self):
        return [b for b in self.bins if not b.passed]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.CSV_FIELDS)
            for b in self.bins:
                wr.writerow(
                    [repr(b.t_center), repr(b.x_center), b.n, repr(b.drift_rate), repr(b.drift_target),
                     repr(b.var_rate), repr(b.var_target), repr(b.ci_radius), int(b.passed)]
                )


def reversal_drift_experiment(field, h, window, n_seeds, bins=(2, 4), seed=0, delta=None, drift_floor=0.05,
                              var_rel_floor=0.05, n_sigma=3.0, collapse_only=False, jobs=1, block=100) -> DriftTable:
    """Bin-wise drift and variance rates of the time-reversed disturbance flow.

    Paths of the reversed flow start at the ``x`` bin centres ``k / n_x`` at the
    beginning of every slot of length ``delta`` (default ``10 h``) and run for
    one slot. Rates are compared with ``-b + a'/2`` and ``a`` taken at the
    original time ``-t``. A bin passes when the drift is within
    ``max(drift_floor, n_sigma * se)`` and the variance rate within
    ``max(var_rel_floor * a, n_sigma * se_var)``.
    """
    n_t, n_x = int(bins[0]), int(bins[1])
    delta = 10.0 * h if delta is None else float(delta)
    t0, t1 = float(window[0]), float(window[1])
    theta = np.arange(1024) / 1024
    for tt in np.linspace(t0, t1, 5):
        check_regime(*disturbance_parameters(field, h, tt, theta, collapse_only), h)
    x_starts = np.arange(n_x) / n_x
    fn = partial(_power_sums, field=field, h=h, window=(t0, t1), delta=delta, x_starts=x_starts,
                 reverse=True, collapse_only=collapse_only, root=seed, n_t=n_t)
    S = sum(map_blocks(fn, seed_blocks(n_seeds, block), jobs))
    n = S[0]
    m1 = S[1] / n
    m2 = S[2] / n
    m3 = S[3] / n
    m4 = S[4] / n
    var = (m2 - m1**2) * n / (n - 1)
    mu4 = m4 - 4 * m1 * m3 + 6 * m1**2 * m2 - 3 * m1**4
    var_se = np.sqrt(np.maximum(mu4 - var**2, 0.0) / n)
    table = DriftTable(delta=delta, h=float(h))
    span = (t1 - t0) / n_t
    for b in range(n_t):
        u_c = -t1 + (b + 0.5) * span
        for i, xc in enumerate(x_starts):
            drift_target = float(-field.b(-u_c, xc) + 0.5 * field.a_prime(-u_c, xc))
            if collapse_only:
                drift_target = float(-0.5 * field.a_prime(-u_c, xc))
            var_target = float(field.a(-u_c, xc))
            se = float(np.sqrt(var[b, i] / n[b, i]) / delta)
            vse = float(var_se[b, i] / delta)
            table.bins.append(
                DriftBin(
                    t_center=float(u_c),
                    x_center=float(xc),
                    n=int(n[b, i]),
                    drift_rate=float(m1[b, i] / delta),
                    drift_target=drift_target,
                    var_rate=float(var[b, i] / delta),
                    var_target=var_target,
                    ci_radius=se,
                    var_ci_radius=vse,
                    drift_tol=max(drift_floor, n_sigma * se),
                    var_tol=max(var_rel_floor * var_target, n_sigma * vse),
                )
            )
    return table
