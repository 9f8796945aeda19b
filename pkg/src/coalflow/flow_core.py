"""Windowed discrete flows of circle maps, their metrics, reversal and paths."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Tuple, Union

import numpy as np

from .circle_maps import TOL, CircleMap, compose, d_map, identity, invert

__all__ = [
    "Interval",
    "DiscreteFlow",
    "FlowPath",
    "WeakFlowReport",
    "flow_map",
    "check_weak_flow",
    "time_reverse",
    "extract_path",
    "extract_bidirectional_path",
    "flow_distance_c",
    "flow_distance_d_upper",
    "cutoff",
]


@dataclass(frozen=True)
class Interval:
    """Bounded interval with open/closed ends; the default is ``(lo, hi]``."""

    lo: float
    hi: float
    lo_closed: bool = False
    hi_closed: bool = True

    def __post_init__(self):
        if self.hi < self.lo:
            raise ValueError(f"empty or reversed interval {self}")

    @classmethod
    def coerce(cls, obj) -> "Interval":
        if isinstance(obj, Interval):
            return obj
        if len(obj) == 2:
            return cls(float(obj[0]), float(obj[1]))
        if len(obj) == 4:
            return cls(float(obj[0]), float(obj[1]), bool(obj[2]), bool(obj[3]))
        if len(obj) == 3:
            # (lo, hi, "(]") style closedness string
            tag = str(obj[2])
            return cls(float(obj[0]), float(obj[1]), tag[0] == "[", tag[-1] == "]")
        raise ValueError(f"cannot read an interval from {obj!r}")

    @property
    def is_empty(self) -> bool:
        return self.lo == self.hi and not (self.lo_closed and self.hi_closed)

    def contains(self, t):
        t = np.asarray(t, dtype=float)
        above = (t > self.lo) | (self.lo_closed & (t == self.lo))
        below = (t < self.hi) | (self.hi_closed & (t == self.hi))
        return above & below

    def negate(self) -> "Interval":
        return Interval(-self.hi, -self.lo, self.hi_closed, self.lo_closed)

    def __str__(self):
        return f"{'[' if self.lo_closed else '('}{self.lo:g}, {self.hi:g}{']' if self.hi_closed else ')'}"


class DiscreteFlow:
    """A flow on ``window`` generated by maps applied at isolated times.

    ``events`` is a sequence of ``(time, CircleMap)`` with strictly increasing
    times inside the window.
    """

    def __init__(self, window, events=()):
        t0, t1 = float(window[0]), float(window[1])
        if not t1 > t0:
            raise ValueError("window must have t_start < t_end")
        times = np.array([float(t) for t, _ in events], dtype=float)
        maps = [m for _, m in events]
        if times.size:
            if np.any(np.diff(times) <= 0.0):
                raise ValueError("event times must be strictly increasing")
            if times[0] < t0 or times[-1] > t1:
                raise ValueError("event times must lie inside the window")
        for m in maps:
            if not isinstance(m, CircleMap):
                raise TypeError("events must carry CircleMap instances")
        self.window = (t0, t1)
        self.times = times
        self.maps = tuple(maps)

    @property
    def events(self):
        return list(zip(self.times.tolist(), self.maps))

    def __len__(self):
        return len(self.maps)

    def __eq__(self, other):
        if not isinstance(other, DiscreteFlow):
            return NotImplemented
        return (
            self.window == other.window
            and np.array_equal(self.times, other.times)
            and all(a == b for a, b in zip(self.maps, other.maps))
        )

    def isclose(self, other, tol=1e-9) -> bool:
        if len(self) != len(other):
            return False
        if max(abs(a - b) for a, b in zip(self.window, other.window)) > tol:
            return False
        if self.times.size and np.max(np.abs(self.times - other.times)) > tol:
            return False
        return all(a.isclose(b, tol) for a, b in zip(self.maps, other.maps))

    def __repr__(self):
        return f"DiscreteFlow(window={self.window}, n_events={len(self)})"

    def event_slice(self, interval) -> slice:
        """Indices of the events whose times lie in ``interval``."""
        iv = Interval.coerce(interval)
        lo = np.searchsorted(self.times, iv.lo, side="left" if iv.lo_closed else "right")
        hi = np.searchsorted(self.times, iv.hi, side="right" if iv.hi_closed else "left")
        return slice(int(lo), int(max(lo, hi)))

    def flow_map(self, interval) -> CircleMap:
        return flow_map(self, interval)

    def to_json(self):
        return {"window": list(self.window), "events": [[t, m.to_json()] for t, m in self.events]}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["window"], [(t, CircleMap.from_json(m)) for t, m in obj["events"]])

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass
class FlowPath:
    """Cadlag path: the value at an event time is the post-event value.

    ``positions`` are on the unwrapped lift; reduce mod 1 only for display.
    """

    start: Tuple[float, float]
    times: np.ndarray
    positions: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        i = np.searchsorted(self.times, t, side="right") - 1
        i = np.clip(i, 0, len(self.times) - 1)
        out = self.positions[i]
        return float(out) if out.ndim == 0 else out

    @property
    def samples(self):
        return list(zip(self.times.tolist(), self.positions.tolist()))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "position"])
            for t, x in zip(self.times, self.positions):
                w.writerow([repr(float(t)), repr(float(x))])


def flow_map(flow: DiscreteFlow, interval) -> CircleMap:
    """Compose, in time order, the event maps whose times lie in ``interval``."""
    iv = Interval.coerce(interval)
    t0, t1 = flow.window
    if iv.lo < t0 - TOL or iv.hi > t1 + TOL:
        raise ValueError(f"interval {iv} is not inside the window {flow.window}")
    out = identity()
    if iv.is_empty:
        return out
    for m in flow.maps[flow.event_slice(iv)]:
        out = compose(m, out)
    return out


# -- weak flow axioms --------------------------------------------------------------


@dataclass
class WeakFlowReport:
    n_splits: int
    n_points: int
    violations: List[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _split_problem(I, I1, I2):
    """Return a message if ``I`` is not the disjoint union of ``I1`` and ``I2`` (in order)."""
    if I1.is_empty or I2.is_empty:
        return None if (I1.is_empty and I2 == I) or (I2.is_empty and I1 == I) else "empty piece does not match"
    if I1.hi > I2.lo or (I1.hi == I2.lo and I1.hi_closed and I2.lo_closed):
        return "pieces overlap or are out of order"
    if I1.hi != I2.lo or (not I1.hi_closed and not I2.lo_closed):
        return "pieces are not adjacent"
    if (I1.lo, I1.lo_closed) != (I.lo, I.lo_closed) or (I2.hi, I2.hi_closed) != (I.hi, I.hi_closed):
        return "union of pieces differs from the interval"
    return None


def check_weak_flow(flow, splits: Sequence, n_points: int = 256, tol: float = 1e-10) -> WeakFlowReport:
    """Check the monotone gluing inequalities on a grid of ``n_points`` x-values.

    ``flow`` is a :class:`DiscreteFlow` or any callable ``interval -> CircleMap``.
    Each split is ``(I, I1, I2)`` with ``I`` the disjoint union of ``I1``
    followed by ``I2``.
    """
    family: Callable = flow.flow_map if isinstance(flow, DiscreteFlow) else flow
    xs = np.arange(n_points) / n_points
    report = WeakFlowReport(len(splits), n_points)
    for k, split in enumerate(splits):
        I, I1, I2 = (Interval.coerce(s) for s in split)
        problem = _split_problem(I, I1, I2)
        if problem is not None:
            report.violations.append({"split": k, "kind": "precondition", "detail": problem})
            continue
        phi, p1, p2 = family(I), family(I1), family(I2)
        lower = p2.evaluate(p1.evaluate(xs, "left"), "left")
        mid_lo = phi.evaluate(xs, "left")
        mid_hi = phi.evaluate(xs, "right")
        upper = p2.evaluate(p1.evaluate(xs, "right"), "right")
        for name, a, b in (("lower", lower, mid_lo), ("middle", mid_lo, mid_hi), ("upper", mid_hi, upper)):
            bad = np.flatnonzero(a > b + tol)
            if bad.size:
                report.violations.append(
                    {"split": k, "kind": name, "x": float(xs[bad[0]]), "excess": float(np.max(a[bad] - b[bad]))}
                )
    return report


# -- reversal and paths --------------------------------------------------------------


def time_reverse(flow: DiscreteFlow) -> DiscreteFlow:
    """``(t, F) -> (-t, F^-1)`` in reversed order on the negated window."""
    t0, t1 = flow.window
    events = [(-t, invert(m)) for t, m in reversed(flow.events)]
    return DiscreteFlow((-t1, -t0), events)


def extract_path(flow: DiscreteFlow, e, side: str = "right") -> FlowPath:
    """``t -> flow_map((s, t])(x)`` for ``t`` in ``[s, t_end]``."""
    s, x = float(e[0]), float(e[1])
    t0, t1 = flow.window
    if not t0 <= s <= t1:
        raise ValueError("start time outside the window")
    sl = flow.event_slice(Interval(s, t1))
    times = [s]
    pos = [x]
    v = x
    for t, m in zip(flow.times[sl], flow.maps[sl]):
        v = float(m.evaluate(v, side))
        times.append(float(t))
        pos.append(v)
    return FlowPath((s, x), np.array(times), np.array(pos))


def extract_bidirectional_path(flow: DiscreteFlow, e, side: str = "right") -> FlowPath:
    """Forward path on ``[s, t_end]`` and ``(flow^-1)_{(t, s]}(x)`` for ``t < s``.

    The backward part is built by applying inverse event maps going back in
    time; as a function of forward time it is again right-continuous.
    """
    s, x = float(e[0]), float(e[1])
    t0, t1 = flow.window
    fwd = extract_path(flow, (s, x), side)
    sl = flow.event_slice(Interval(t0, s, True, True))
    taus = flow.times[sl]
    # V[j] = F_j^-1 o ... o F_k^-1 (x), held on [tau_{j-1}, tau_j)
    vals = [x]
    for m in flow.maps[sl][::-1]:
        vals.append(float(invert(m).evaluate(vals[-1], side)))
    vals = vals[::-1]
    bt = np.concatenate(([t0], taus))
    bx = np.array(vals)
    # later samples at the same time win
    keep = (bt < s) & np.concatenate((bt[1:] != bt[:-1], [True]))
    times = np.concatenate((bt[keep], fwd.times))
    positions = np.concatenate((bx[keep], fwd.positions))
    return FlowPath((s, x), times, positions)


# -- metrics ------------------------------------------------------------------------


def flow_distance_c(A: DiscreteFlow, B: DiscreteFlow, n: int = 1, grid: int = 64) -> float:
    """Sampled ``sup d_map(A_(s,t], B_(s,t])`` over a grid of ``s < t`` in ``(-n, n)``.

    A lower bound for the supremum over all pairs; grid points are chosen
    off the event times so that the open/closed convention does not matter.
    """
    pts = np.linspace(-n, n, grid + 2)[1:-1]
    best = 0.0
    for i, s in enumerate(pts):
        fa, fb = identity(), identity()
        prev = s
        for t in pts[i + 1 :]:
            for m in A.maps[A.event_slice(Interval(prev, t))]:
                fa = compose(m, fa)
            for m in B.maps[B.event_slice(Interval(prev, t))]:
                fb = compose(m, fb)
            prev = t
            best = max(best, d_map(fa, fb))
    return best


def cutoff(n: int, lo: float, hi: float) -> float:
    """``0 v (n + 1 - R) ^ 1`` with ``R = sup I v (-inf I)``."""
    R = max(hi, -lo)
    return float(min(max(n + 1 - R, 0.0), 1.0))


def flow_distance_d_upper(A: DiscreteFlow, B: DiscreteFlow, n: int = 1) -> float:
    """Upper bound of the cadlag flow distance using the identity time change.

    With the time change fixed to the identity this is the supremum, over all
    intervals ``I``, of ``cutoff(I) * d_map(A_I, B_I)``. Every interval has the
    same event content as the closed interval spanned by its first and last
    event, and that closed interval has the larger cutoff, so the supremum
    runs over closed intervals between event times only.
    """
    R = n + 1.0
    ev = np.concatenate((A.times, B.times))
    ev = np.unique(ev[(ev > -R) & (ev < R)])
    at_a = {float(t): m for t, m in zip(A.times, A.maps)}
    at_b = {float(t): m for t, m in zip(B.times, B.maps)}
    best = 0.0
    for i, lo in enumerate(ev):
        fa, fb = identity(), identity()
        for hi in ev[i:]:
            c = cutoff(n, lo, hi)
            if c == 0.0:
                break  # the cutoff only shrinks as hi grows
            if float(hi) in at_a:
                fa = compose(at_a[float(hi)], fa)
            if float(hi) in at_b:
                fb = compose(at_b[float(hi)], fb)
            best = max(best, c * d_map(fa, fb))
    return best
