"""Poisson-clocked disturbance flows built from an explicit collapse-and-shift family.

One disturbance with centre ``theta`` at time ``t`` does two things:

* it collapses the arc ``theta +- w`` onto ``theta``, with
  ``w = (3 a(t, theta) h / 2)^(1/3)``;
* it shifts the band ``theta + 1/2 +- H`` by ``r``, where ``H = h^(1/3)`` and
  ``r = h^(2/3) (b - a') / 2`` with the coefficients taken at the band centre.
  Flat pieces of width ``|r|`` reconnect the band to the identity.

Every map is available both as an exact :class:`CircleMap` and as a
vectorised closed-form displacement; the latter drives the Monte Carlo
experiments and is tested against the former.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .circle_maps import CircleMap
from .coeff_dsl import CoefficientField
from .flow_core import DiscreteFlow

__all__ = [
    "ParamsOutOfRegime",
    "PoissonClock",
    "ExplicitDisturbanceParams",
    "MomentReport",
    "disturbance_parameters",
    "check_regime",
    "sample_explicit_map",
    "sample_explicit_inverse_map",
    "forward_displacement",
    "inverse_displacement",
    "build_clock",
    "draw_events",
    "build_disturbance_flow",
    "build_reversed_disturbance_flow",
    "moment_quadrature",
    "max_displacement_bound",
    "localization_radius",
    "limit_statistics",
    "estimate_moments",
    "estimate_reversed_moments",
    "write_moment_reports",
    "flow_seed",
    "padded_events",
    "disturbance_endpoints",
]

Z99 = 2.5758293035489004


class ParamsOutOfRegime(ValueError):
    pass


# -- parameters --------------------------------------------------------------------


def disturbance_parameters(field: CoefficientField, h, t, theta, collapse_only=False):
    """Collapse half-width ``w`` and band shift ``r`` for centres ``theta`` at times ``t``."""
    theta = np.asarray(theta, dtype=float)
    t = np.asarray(t, dtype=float)
    w = np.cbrt(1.5 * field.a(t, theta) * h)
    if collapse_only:
        r = np.zeros(np.broadcast(t, theta).shape)
    else:
        c = np.mod(theta - 0.5, 1.0)
        r = 0.5 * h ** (2.0 / 3.0) * (field.b(t, c) - field.a_prime(t, c))
    return w, r


def check_regime(w, r, h):
    """Raise unless every map is monotone with disjoint collapse and band."""
    H = h ** (1.0 / 3.0)
    w = np.asarray(w)
    r = np.asarray(r)
    if w.size == 0:
        return
    if np.max(w) >= 0.25:
        raise ParamsOutOfRegime(f"collapse half-width {np.max(w):.4g} >= 1/4 at h={h:g}")
    if np.max(np.abs(r)) >= H:
        raise ParamsOutOfRegime(f"band shift {np.max(np.abs(r)):.4g} >= h^(1/3) at h={h:g}")
    if np.max(w + H + np.abs(r)) >= 0.5:
        raise ParamsOutOfRegime(f"collapse and band overlap at h={h:g}")


@dataclass(frozen=True)
class ExplicitDisturbanceParams:
    field: CoefficientField
    h: float
    t: float
    theta: float
    collapse_only: bool = False

    @property
    def H(self):
        return self.h ** (1.0 / 3.0)

    @property
    def wr(self):
        w, r = disturbance_parameters(self.field, self.h, self.t, self.theta, self.collapse_only)
        return float(w), float(r)

    @property
    def w(self):
        return self.wr[0]

    @property
    def r(self):
        return self.wr[1]


def _forward_breakpoints(w, r, H):
    bp = [(w, 0.0, w), (-w, -w, 0.0)]
    lo, hi = 0.5 - H, 0.5 + H
    if r > 0.0:
        bp += [(lo, lo, lo + r), (hi, hi + r, hi + r), (hi + r, hi + r, hi + r)]
    elif r < 0.0:
        bp += [(lo + r, lo + r, lo + r), (lo, lo + r, lo + r), (hi, hi + r, hi)]
    return bp


def _inverse_breakpoints(w, r, H):
    bp = [(0.0, -w, w), (w, w, w), (-w, -w, -w)]
    lo, hi = 0.5 - H, 0.5 + H
    if r > 0.0:
        bp += [(lo, lo, lo), (lo + r, lo, lo), (hi + r, hi, hi + r)]
    elif r < 0.0:
        bp += [(lo + r, lo + r, lo), (hi + r, hi, hi), (hi, hi, hi)]
    return bp


def _place(bp, theta):
    return CircleMap([(theta + x, theta + ym, theta + yp) for x, ym, yp in bp])


def sample_explicit_map(p: ExplicitDisturbanceParams) -> CircleMap:
    """The disturbance ``F_{h,t}`` centred at ``theta`` as an exact circle map."""
    w, r = p.wr
    check_regime(w, r, p.h)
    return _place(_forward_breakpoints(w, r, p.H), p.theta)


def sample_explicit_inverse_map(p: ExplicitDisturbanceParams) -> CircleMap:
    """``F_{h,t}^-1`` written down directly: collapse becomes a split, the band shifts back."""
    w, r = p.wr
    check_regime(w, r, p.h)
    return _place(_inverse_breakpoints(w, r, p.H), p.theta)


# -- closed-form displacements -------------------------------------------------------


def forward_displacement(x, theta, w, r, H):
    """``F(x) - x`` for the right-continuous forward map (broadcasts)."""
    d = np.mod(x - theta, 1.0)
    out = np.zeros(np.broadcast(d, w, r, H).shape)
    out = np.where(d < w, -d, out)
    out = np.where(d >= 1.0 - w, 1.0 - d, out)
    lo = 0.5 - H
    hi = 0.5 + H
    pos = r >= 0.0
    band_p = pos & (d >= lo) & (d < hi + r)
    band_n = ~pos & (d >= lo + r) & (d < hi)
    out = np.where(band_p, np.minimum(d + r, hi + r) - d, out)
    out = np.where(band_n, np.maximum(d + r, lo + r) - d, out)
    return out


def inverse_displacement(x, theta, w, r, H):
    """``G(x) - x`` for the right-continuous inverse map (broadcasts)."""
    e = np.mod(x - theta, 1.0)
    out = np.zeros(np.broadcast(e, w, r, H).shape)
    out = np.where(e < w, w - e, out)
    out = np.where(e >= 1.0 - w, 1.0 - w - e, out)
    lo = 0.5 - H
    hi = 0.5 + H
    pos = r >= 0.0
    band_p = pos & (e >= lo) & (e < hi + r)
    band_n = ~pos & (e >= lo + r) & (e < hi)
    out = np.where(band_p, np.maximum(e - r, lo) - e, out)
    out = np.where(band_n, np.minimum(e - r, hi) - e, out)
    return out


# -- clock and flows -----------------------------------------------------------------


@dataclass
class PoissonClock:
    h: float
    window: tuple
    times: np.ndarray

    def __len__(self):
        return len(self.times)


def _clock_times(rng, h, window):
    t0, t1 = float(window[0]), float(window[1])
    length = t1 - t0
    if length <= 0.0:
        return np.empty(0)
    mean = length / h
    chunk = int(mean + 6.0 * np.sqrt(mean) + 16)
    gaps = rng.exponential(h, chunk)
    total = np.cumsum(gaps)
    while total[-1] <= length:
        more = np.cumsum(rng.exponential(h, chunk)) + total[-1]
        total = np.concatenate((total, more))
    return t0 + total[total < length]


def build_clock(h, window, seed) -> PoissonClock:
    """Event times of a rate ``1/h`` Poisson process on ``(t0, t1)``."""
    if h <= 0.0:
        raise ValueError("h must be positive")
    rng = np.random.default_rng(seed)
    return PoissonClock(float(h), (float(window[0]), float(window[1])), _clock_times(rng, h, window))


def draw_events(h, window, seed):
    """Clock times and i.i.d. uniform centres; the single source of randomness for a flow."""
    rng = np.random.default_rng(seed)
    times = _clock_times(rng, h, window)
    thetas = rng.random(times.size)
    return times, thetas


def build_disturbance_flow(field, h, window, seed, collapse_only=False) -> DiscreteFlow:
    """A disturbance flow with one explicit map per clock event."""
    times, thetas = draw_events(h, window, seed)
    w, r = disturbance_parameters(field, h, times, thetas, collapse_only)
    check_regime(w, r, h)
    H = h ** (1.0 / 3.0)
    events = [(t, _place(_forward_breakpoints(wi, ri, H), th)) for t, th, wi, ri in zip(times, thetas, w, r)]
    return DiscreteFlow(window, events)


def build_reversed_disturbance_flow(field, h, window, seed, collapse_only=False) -> DiscreteFlow:
    """The reversed flow assembled directly: at time ``-t`` apply ``G_{h,-t} = F_{h,t}^-1``."""
    times, thetas = draw_events(h, window, seed)
    w, r = disturbance_parameters(field, h, times, thetas, collapse_only)
    check_regime(w, r, h)
    H = h ** (1.0 / 3.0)
    events = [
        (-t, _place(_inverse_breakpoints(wi, ri, H), th))
        for t, th, wi, ri in zip(times[::-1], thetas[::-1], w[::-1], r[::-1])
    ]
    return DiscreteFlow((-window[1], -window[0]), events)


# -- moments ------------------------------------------------------------------------

_GL_ORDER = 24


def _boundary_offsets(w, r, H):
    """Offsets ``(x - theta) mod 1`` at which the displacement can jump or kink."""
    return [0.0 * w, w, -w, 0.5 - H + 0.0 * r, 0.5 + H + 0.0 * r, 0.5 - H + r, 0.5 + H + r]


def moment_quadrature(field, h, t, x, reverse=False, collapse_only=False, order=_GL_ORDER):
    """``(b_h, a_h)`` at ``(t, x)`` by piecewise Gauss-Legendre integration over ``theta``.

    The displacement is smooth in ``theta`` except where ``x - theta`` crosses
    one of the moving boundaries; those crossings are located by fixed-point
    iteration and used as panel ends, so the result is accurate to roughly
    machine precision rather than grid resolution.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    H = h ** (1.0 / 3.0)
    n_b = 7
    roots = np.empty((x.size, n_b))
    for k in range(n_b):
        th = x.copy()
        for _ in range(60):
            w, r = disturbance_parameters(field, h, t, th, collapse_only)
            th = np.mod(x - _boundary_offsets(w, r, H)[k], 1.0)
        roots[:, k] = th
    roots = np.sort(roots, axis=1)
    ends = np.concatenate((roots, roots[:, :1] + 1.0), axis=1)
    a_, b_ = ends[:, :-1], ends[:, 1:]
    nodes, weights = np.polynomial.legendre.leggauss(order)
    half = (b_ - a_)[..., None] / 2.0
    th = (a_ + b_)[..., None] / 2.0 + half * nodes
    wt = half * weights
    w, r = disturbance_parameters(field, h, t, np.mod(th, 1.0), collapse_only)
    disp = inverse_displacement if reverse else forward_displacement
    f = disp(x[:, None, None], th, w, r, H)
    b_h = np.sum(wt * f, axis=(1, 2)) / h
    a_h = np.sum(wt * f * f, axis=(1, 2)) / h
    return b_h, a_h


def _targets(field, t, x, reverse, collapse_only):
    ap = field.a_prime(t, x)
    b_eff = ap if collapse_only else field.b(t, x)
    if reverse:
        b_eff = -b_eff + 0.5 * ap
    return b_eff, field.a(t, x)


def max_displacement_bound(field, h, ts, n_theta=1024, collapse_only=False):
    """``sup |F(x) - x|``: the larger of the collapse half-width and ``|r|`` over a grid."""
    theta = np.arange(n_theta) / n_theta
    best = 0.0
    for t in np.atleast_1d(ts):
        w, r = disturbance_parameters(field, h, t, theta, collapse_only)
        best = max(best, float(np.max(np.maximum(w, np.abs(r)))))
    return best


def localization_radius(field, h, t, n_x=256, n_theta=2**14, reverse=False, collapse_only=False):
    """Smallest grid ``lam`` with ``E|F~(x) F~(y)| / h < lam`` whenever ``|x - y| >= lam``.

    Distances are circular and ``lam`` ranges over multiples of ``1/n_x`` in
    ``[0, 1/2]``. The expectation is a midpoint rule over ``n_theta`` centres.
    """
    H = h ** (1.0 / 3.0)
    xs = np.arange(n_x) / n_x
    theta = (np.arange(n_theta) + 0.5) / n_theta
    w, r = disturbance_parameters(field, h, t, theta, collapse_only)
    disp = inverse_displacement if reverse else forward_displacement
    D = np.abs(disp(xs[:, None], theta[None, :], w[None, :], r[None, :], H))
    g = D @ D.T / (n_theta * h)
    k = np.arange(n_x)
    dist = np.minimum(k, n_x - k)
    # worst product moment at each circular grid distance
    worst = np.zeros(n_x // 2 + 1)
    for i in range(n_x):
        np.maximum.at(worst, dist[(k - i) % n_x], g[i, :])
    lam_grid = np.arange(n_x // 2 + 1) / n_x
    # tail[j] = max over distances >= j
    tail = np.maximum.accumulate(worst[::-1])[::-1]
    ok = tail < lam_grid
    return float(lam_grid[np.argmax(ok)]) if np.any(ok) else 0.5


def limit_statistics(field, h, n_t=3, n_x=64, reverse=False, collapse_only=False, lambda_n_x=256, lambda_n_theta=2**14):
    """Grid suprema ``B_h``, ``A_h``, ``M_h`` and ``lambda_h`` over the field window."""
    ts = np.linspace(field.window[0], field.window[1], n_t)
    xs = np.arange(n_x) / n_x
    B = A = lam = 0.0
    theta = np.arange(1024) / 1024
    for t in ts:
        check_regime(*disturbance_parameters(field, h, t, theta, collapse_only), h)
        b_h, a_h = moment_quadrature(field, h, t, xs, reverse, collapse_only)
        b_t, a_t = _targets(field, t, xs, reverse, collapse_only)
        B = max(B, float(np.max(np.abs(b_h - b_t))))
        A = max(A, float(np.max(np.abs(a_h - a_t))))
        lam = max(lam, localization_radius(field, h, t, lambda_n_x, lambda_n_theta, reverse, collapse_only))
    M = max_displacement_bound(field, h, ts, collapse_only=collapse_only)
    return {"B_h": B, "A_h": A, "M_h": M, "lambda_h": lam}


@dataclass
class MomentReport:
    h: float
    t: float
    x: float
    b_h: float
    a_h: float
    M_h: float
    lambda_h: float
    B_h: float
    A_h: float
    ci_radius: float
    samples: int
    ci_radius_a: float = float("nan")

    CSV_FIELDS = ("h", "t", "x", "b_h", "a_h", "M_h", "lambda_h", "B_h", "A_h", "ci_radius", "samples")

    def row(self):
        d = asdict(self)
        return [d[k] for k in self.CSV_FIELDS]


def _estimate(field, h, t, x, n_samples, seed, reverse, collapse_only, stats):
    if n_samples < 10_000:
        raise ValueError("n_samples must be at least 1e4")
    rng = np.random.default_rng(seed)
    theta = rng.random(n_samples)
    w, r = disturbance_parameters(field, h, t, theta, collapse_only)
    check_regime(w, r, h)
    disp = inverse_displacement if reverse else forward_displacement
    f = disp(x, theta, w, r, h ** (1.0 / 3.0))
    b_s = f / h
    a_s = f * f / h
    if stats is None:
        stats = limit_statistics(field, h, reverse=reverse, collapse_only=collapse_only)
    return MomentReport(
        h=float(h),
        t=float(t),
        x=float(x),
        b_h=float(b_s.mean()),
        a_h=float(a_s.mean()),
        M_h=stats["M_h"],
        lambda_h=stats["lambda_h"],
        B_h=stats["B_h"],
        A_h=stats["A_h"],
        ci_radius=float(Z99 * b_s.std(ddof=1) / np.sqrt(n_samples)),
        samples=int(n_samples),
        ci_radius_a=float(Z99 * a_s.std(ddof=1) / np.sqrt(n_samples)),
    )


def estimate_moments(field, h, t, x, n_samples, seed, collapse_only=False, stats=None) -> MomentReport:
    """Monte Carlo ``b_h``, ``a_h`` at ``(t, x)`` with 99% intervals, plus grid limit statistics."""
    return _estimate(field, h, t, x, n_samples, seed, False, collapse_only, stats)


def estimate_reversed_moments(field, h, t, x, n_samples, seed, collapse_only=False, stats=None) -> MomentReport:
    """As :func:`estimate_moments` for the inverse maps ``F^-1``."""
    return _estimate(field, h, t, x, n_samples, seed, True, collapse_only, stats)


def write_moment_reports(path, reports):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(MomentReport.CSV_FIELDS)
        for rep in reports:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in rep.row()])


# -- vectorised path engine ---------------------------------------------------------------


def flow_seed(root, index):
    """Seed of flow number ``index`` in a family rooted at ``root``."""
    return np.random.SeedSequence([int(root), int(index)])


def padded_events(field, h, window, seeds, collapse_only=False):
    """Events of several flows as zero-padded ``(n_flows, n_max)`` arrays.

    Returns ``times, thetas, w, r, count``. Padding entries have ``w = r = 0``,
    which makes them the identity in both displacement formulas.
    """
    draws = [draw_events(h, window, s) for s in seeds]
    counts = np.array([len(t) for t, _ in draws], dtype=int)
    n_max = int(counts.max()) if counts.size else 0
    times = np.full((len(draws), n_max), np.inf)
    thetas = np.zeros((len(draws), n_max))
    for i, (t, th) in enumerate(draws):
        times[i, : len(t)] = t
        thetas[i, : len(t)] = th
    valid = np.arange(n_max)[None, :] < counts[:, None]
    w = np.zeros_like(thetas)
    r = np.zeros_like(thetas)
    if valid.any():
        wv, rv = disturbance_parameters(field, h, times[valid], thetas[valid], collapse_only)
        check_regime(wv, rv, h)
        w[valid] = wv
        r[valid] = rv
    return times, thetas, w, r, counts


def disturbance_endpoints(field, h, window, x0, seeds, collapse_only=False):
    """Lift position at the window end of the path started at ``(window[0], x0)``, one per seed.

    Uses the closed-form right-continuous displacement; equal to evaluating the
    composed :class:`CircleMap` flow with ``side="right"``.
    """
    H = h ** (1.0 / 3.0)
    _, thetas, w, r, _ = padded_events(field, h, window, seeds, collapse_only)
    X = np.full(thetas.shape[0], float(x0))
    for k in range(thetas.shape[1]):
        X = X + forward_displacement(X, thetas[:, k], w[:, k], r[:, k], H)
    return X
