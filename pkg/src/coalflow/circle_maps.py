"""Exact algebra on monotone degree-1 circle maps.

A :class:`CircleMap` is a pair ``{f-, f+}`` of left- and right-continuous
modifications of one non-decreasing function with ``f(x + 1) = f(x) + 1``.
It is stored as a finite list of breakpoints ``(x, y_minus, y_plus)`` with
``x`` in ``[0, 1)``; between consecutive breakpoints the map is affine from
``(x_i, y_plus_i)`` to ``(x_{i+1}, y_minus_{i+1})`` and the last segment wraps
round to ``(x_0 + 1, y_minus_0 + 1)``.

Everything here works on the *completed graph*: the monotone polyline obtained
by joining each jump with a vertical segment. Inversion swaps the axes of that
polyline, and the chi transform rotates it by 45 degrees.
"""
from __future__ import annotations

import math

import numpy as np

TOL = 1e-12
# stored coordinates are multiples of 2**-50, a few ulp, so shifting them by an
# integer, as wrapping and inversion do, is exact for lifts inside (-8, 8)
GRID = 2.0**50

__all__ = [
    "TOL",
    "AmbiguousComposition",
    "InvalidCircleMap",
    "CircleMap",
    "ChiFunction",
    "identity",
    "shift",
    "evaluate",
    "invert",
    "compose",
    "chi_transform",
    "d_map",
    "random_map",
]


class InvalidCircleMap(ValueError):
    pass


class AmbiguousComposition(ValueError):
    """A flat of the inner map lands on a jump of the outer map."""


def _snap(v):
    return np.round(v * GRID) / GRID


class CircleMap:
    """Monotone degree-1 map of the line, stored by its fundamental domain.

    Instances are immutable. Construction rounds coordinates to the dyadic
    grid ``GRID``, reduces positions mod 1, merges breakpoints closer than
    ``TOL`` and removes collinear continuous breakpoints, so two maps with the
    same graph compare equal structurally.
    """

    __slots__ = ("_x", "_ym", "_yp")

    def __init__(self, breakpoints, canonicalize=True):
        bp = np.asarray(breakpoints, dtype=float).reshape(-1, 3)
        if bp.shape[0] == 0:
            raise InvalidCircleMap("a circle map needs at least one breakpoint")
        if not np.all(np.isfinite(bp)):
            raise InvalidCircleMap("breakpoints must be finite")
        bp = _snap(bp)
        x, ym, yp = bp[:, 0].copy(), bp[:, 1].copy(), bp[:, 2].copy()
        k = np.floor(x)
        x -= k
        ym -= k
        yp -= k
        # positions that rounded up to 1.0 belong at 0
        top = x >= 1.0
        x[top] -= 1.0
        ym[top] -= 1.0
        yp[top] -= 1.0
        order = np.argsort(x, kind="stable")
        x, ym, yp = x[order], ym[order], yp[order]
        if canonicalize:
            x, ym, yp = _canonicalize(x, ym, yp)
        _validate(x, ym, yp)
        for arr in (x, ym, yp):
            arr.setflags(write=False)
        self._x, self._ym, self._yp = x, ym, yp

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_json(cls, obj):
        return cls(obj["breakpoints"])

    def to_json(self):
        return {"breakpoints": [[float(a), float(b), float(c)] for a, b, c in self.breakpoints]}

    @classmethod
    def _from_polyline(cls, px, py):
        """Build a map from one period of a monotone polyline.

        ``(px[0], py[0]) + (1, 1)`` is taken as the closing vertex. Vertices
        sharing a first coordinate become one breakpoint (a jump).
        """
        px = np.asarray(px, dtype=float)
        py = np.asarray(py, dtype=float)
        n = len(px)
        prev = np.concatenate(([px[-1] - 1.0], px[:-1]))
        boundary = np.flatnonzero(np.abs(px - prev) > TOL)
        if boundary.size == 0:
            raise InvalidCircleMap("polyline does not advance in x")
        j0 = boundary[0]
        if j0:
            px = np.concatenate((px[j0:], px[:j0] + 1.0))
            py = np.concatenate((py[j0:], py[:j0] + 1.0))
        starts = np.concatenate(([True], np.abs(np.diff(px)) > TOL))
        first = np.flatnonzero(starts)
        last = np.concatenate((first[1:] - 1, [n - 1]))
        bp = np.column_stack((px[first], py[first], py[last]))
        return cls(bp)

    # -- accessors ------------------------------------------------------------

    @property
    def positions(self):
        return self._x

    @property
    def y_minus(self):
        return self._ym

    @property
    def y_plus(self):
        return self._yp

    @property
    def breakpoints(self):
        return list(zip(self._x.tolist(), self._ym.tolist(), self._yp.tolist()))

    def __len__(self):
        return len(self._x)

    def __eq__(self, other):
        if not isinstance(other, CircleMap):
            return NotImplemented
        return (
            len(self) == len(other)
            and np.array_equal(self._x, other._x)
            and np.array_equal(self._ym, other._ym)
            and np.array_equal(self._yp, other._yp)
        )

    def __hash__(self):
        return hash((self._x.tobytes(), self._ym.tobytes(), self._yp.tobytes()))

    def isclose(self, other, tol=TOL):
        """Structural equality up to ``tol`` in every stored coordinate."""
        if len(self) != len(other):
            return False
        return bool(
            np.all(np.abs(self._x - other._x) <= tol)
            and np.all(np.abs(self._ym - other._ym) <= tol)
            and np.all(np.abs(self._yp - other._yp) <= tol)
        )

    def __repr__(self):
        inner = ", ".join(f"({a:.6g}, {b:.6g}, {c:.6g})" for a, b, c in self.breakpoints)
        return f"CircleMap([{inner}])"

    # -- structure ------------------------------------------------------------

    def jump_mask(self):
        return self._yp - self._ym > TOL

    def segments(self):
        """Segment endpoints ``(x0, y0, x1, y1)`` over one period, wrap last."""
        x1 = np.concatenate((self._x[1:], [self._x[0] + 1.0]))
        y1 = np.concatenate((self._ym[1:], [self._ym[0] + 1.0]))
        return self._x, self._yp, x1, y1

    def flats(self):
        """List of ``(x_start, x_end, value)`` for segments of slope zero."""
        x0, y0, x1, y1 = self.segments()
        mask = np.abs(y1 - y0) <= TOL
        return [(a, b, v) for a, b, v in zip(x0[mask].tolist(), x1[mask].tolist(), y0[mask].tolist())]

    def jumps(self):
        """List of ``(x, y_minus, y_plus)`` with a strict jump."""
        m = self.jump_mask()
        return list(zip(self._x[m].tolist(), self._ym[m].tolist(), self._yp[m].tolist()))

    def is_continuous(self):
        return not bool(np.any(self.jump_mask()))

    def max_displacement(self):
        """``sup |f(x) - x|``, attained at a breakpoint for piecewise-linear maps."""
        return float(max(np.max(np.abs(self._ym - self._x)), np.max(np.abs(self._yp - self._x))))

    def vertices(self):
        """One period of the completed-graph polyline as ``(px, py)``."""
        jump = self.jump_mask()
        reps = np.where(jump, 2, 1)
        px = np.repeat(self._x, reps)
        py = np.empty(px.shape)
        idx = np.concatenate(([0], np.cumsum(reps)[:-1]))
        py[idx] = self._ym
        py[idx + reps - 1] = self._yp
        return px, py

    def graph(self):
        """Closed polyline over ``[x_0, x_0 + 1]`` for plotting."""
        px, py = self.vertices()
        return np.append(px, px[0] + 1.0), np.append(py, py[0] + 1.0)

    # -- evaluation -----------------------------------------------------------

    def __call__(self, x, side="right"):
        return self.evaluate(x, side)

    def evaluate(self, x, side="right", snap=0.0):
        """Evaluate ``f+`` (``side="right"``) or ``f-`` (``side="left"``).

        ``snap`` treats arguments within that distance of a breakpoint as
        lying exactly on it; composition uses this to keep jumps intact.
        """
        if side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', not {side!r}")
        scalar = np.ndim(x) == 0
        xv = np.asarray(x, dtype=float)
        k = np.floor(xv)
        u = xv - k
        xs, ym, yp = self._x, self._ym, self._yp
        # extended arrays: index 0 is the previous period's last breakpoint,
        # the two trailing entries are the next period's first two
        nxt1 = xs[1] + 1.0 if len(xs) > 1 else xs[0] + 2.0
        X = np.concatenate(([xs[-1] - 1.0], xs, [xs[0] + 1.0, nxt1]))
        YP = np.concatenate(([yp[-1] - 1.0], yp, [yp[0] + 1.0, yp[1 % len(yp)] + 1.0 + (len(yp) == 1)]))
        YM = np.concatenate(([ym[-1] - 1.0], ym, [ym[0] + 1.0, ym[1 % len(ym)] + 1.0 + (len(ym) == 1)]))
        i = np.searchsorted(X, u, side="right") - 1
        if snap > 0.0:
            up = np.abs(X[i + 1] - u) <= snap
            i = np.where(up, i + 1, i)
            u = np.where(up | (np.abs(X[i] - u) <= snap), X[i], u)
        x0, x1 = X[i], X[i + 1]
        y0, y1 = YP[i], YM[i + 1]
        with np.errstate(invalid="ignore", divide="ignore"):
            val = y0 + (u - x0) * ((y1 - y0) / (x1 - x0))
        on = u == x0
        if np.any(on):
            val = np.where(on, YM[i] if side == "left" else YP[i], val)
        out = val + k
        return float(out) if scalar else out


def _canonicalize(x, ym, yp):
    # a removed breakpoint can join two segments into one that rises by at most
    # TOL, which the next pass flattens, so iterate to a fixed point
    while True:
        nx, nym, nyp = _canonical_pass(x, ym, yp)
        if len(nx) == len(x) and np.array_equal(nx, x) and np.array_equal(nym, ym) and np.array_equal(nyp, yp):
            return nx, nym, nyp
        x, ym, yp = nx, nym, nyp


def _canonical_pass(x, ym, yp):
    x, ym, yp = list(x), list(ym), list(yp)
    # merge breakpoints that sit within TOL of each other (cyclically)
    i = 0
    while len(x) > 1 and i < len(x):
        j = (i + 1) % len(x)
        gap = x[j] - x[i] if j else x[0] + 1.0 - x[i]
        if gap <= TOL:
            if j:
                yp[i] = yp[j]
                del x[j], ym[j], yp[j]
            else:
                # the last breakpoint merges into the first across the wrap
                ym[0] = ym[i] - 1.0
                del x[i], ym[i], yp[i]
            continue
        i += 1
    # the mirror image under inversion: segments rising by at most TOL are flats
    n = len(x)
    for i in range(n):
        j = (i + 1) % n
        rise = ym[j] + (0.0 if j else 1.0) - yp[i]
        if rise != 0.0 and abs(rise) <= TOL:
            ym[j] = yp[i] - (0.0 if j else 1.0)
    for i in range(len(x)):
        if abs(yp[i] - ym[i]) <= TOL:
            yp[i] = ym[i]
    # drop continuous breakpoints whose two neighbouring segments are collinear
    changed = True
    while changed and len(x) > 1:
        changed = False
        n = len(x)
        for i in range(n):
            if yp[i] != ym[i]:
                continue
            p = (i - 1) % n
            q = (i + 1) % n
            xp = x[p] - (1.0 if p > i else 0.0)
            yp_prev = yp[p] - (1.0 if p > i else 0.0)
            xq = x[q] + (1.0 if q < i else 0.0)
            ym_next = ym[q] + (1.0 if q < i else 0.0)
            dx1, dy1 = x[i] - xp, ym[i] - yp_prev
            dx2, dy2 = xq - x[i], ym_next - ym[i]
            cross = dx1 * dy2 - dy1 * dx2
            scale = max(abs(dx1) + abs(dy1), 1e-300) * max(abs(dx2) + abs(dy2), 1e-300)
            if abs(cross) <= TOL * scale:
                del x[i], ym[i], yp[i]
                changed = True
                break
    if len(x) == 1 and yp[0] == ym[0]:
        # a kink-free continuous map is a translation: pin its breakpoint at 0
        c = ym[0] - x[0]
        x, ym, yp = [0.0], [c], [c]
    return np.array(x), np.array(ym), np.array(yp)


def _validate(x, ym, yp):
    if np.any(x < 0.0) or np.any(x >= 1.0):
        raise InvalidCircleMap("positions must lie in [0, 1)")
    if np.any(np.diff(x) <= 0.0):
        raise InvalidCircleMap("positions must be strictly increasing")
    if np.any(yp < ym - TOL):
        raise InvalidCircleMap("jumps must be upward (y_minus <= y_plus)")
    nxt = np.concatenate((ym[1:], [ym[0] + 1.0]))
    if np.any(nxt < yp - 1e-9):
        raise InvalidCircleMap("map is not non-decreasing")


class ChiFunction:
    """Continuous 1-periodic piecewise-affine function, stored on ``[0, 1)``."""

    __slots__ = ("t", "values")

    def __init__(self, t, values):
        t = np.asarray(t, dtype=float)
        values = np.asarray(values, dtype=float)
        t.setflags(write=False)
        values.setflags(write=False)
        self.t = t
        self.values = values

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        u = s - np.floor(s)
        T = np.concatenate(([self.t[-1] - 1.0], self.t, [self.t[0] + 1.0]))
        V = np.concatenate(([self.values[-1]], self.values, [self.values[0]]))
        return np.interp(u, T, V)

    def slopes(self):
        T = np.append(self.t, self.t[0] + 1.0)
        V = np.append(self.values, self.values[0])
        return np.diff(V) / np.diff(T)

    def __neg__(self):
        return ChiFunction(self.t, -self.values)


# -- operations ----------------------------------------------------------------


def identity():
    return CircleMap([(0.0, 0.0, 0.0)])


def shift(c):
    return CircleMap([(0.0, c, c)])


def evaluate(m, x, side="right"):
    return m.evaluate(x, side)


def invert(m):
    """The pair ``{(f+)^-1, (f-)^-1}``: jumps become flats and vice versa."""
    px, py = m.vertices()
    return CircleMap._from_polyline(py, px)


def compose(outer, inner):
    """``outer o inner`` taken side by side: ``{g- o f-, g+ o f+}``.

    Raises :class:`AmbiguousComposition` when ``inner`` is constant on an
    interval whose value is a jump position of ``outer``.
    """
    x0, y0, x1, y1 = inner.segments()
    jumps = outer.jump_mask()
    jpos = outer.positions[jumps]
    for v in y0[np.abs(y1 - y0) <= TOL]:
        if jpos.size:
            d = v - np.floor(v) - jpos
            d = np.abs(d - np.round(d))
            if np.any(d <= TOL):
                raise AmbiguousComposition(
                    f"inner map is flat at value {v!r}, a discontinuity of the outer map"
                )
    # positions: the inner breakpoints plus preimages of outer breakpoints
    cand_x = [inner.positions]
    cand_lo = [outer.evaluate(inner.y_minus, "left", snap=TOL)]
    cand_hi = [outer.evaluate(inner.y_plus, "right", snap=TOL)]
    ylo = min(y0.min(), y1.min())
    yhi = max(y0.max(), y1.max())
    ks = np.arange(math.floor(ylo) - 1, math.ceil(yhi) + 2)
    P = (outer.positions[None, :] + ks[:, None]).ravel()
    GM = (outer.y_minus[None, :] + ks[:, None]).ravel()
    GP = (outer.y_plus[None, :] + ks[:, None]).ravel()
    order = np.argsort(P, kind="stable")
    P, GM, GP = P[order], GM[order], GP[order]
    rising = y1 - y0 > TOL
    lo_idx = np.searchsorted(P, y0, side="right")
    hi_idx = np.searchsorted(P, y1, side="left")
    for s in np.flatnonzero(rising & (hi_idx > lo_idx)):
        sel = slice(lo_idx[s], hi_idx[s])
        p = P[sel]
        cand_x.append(x0[s] + (p - y0[s]) * ((x1[s] - x0[s]) / (y1[s] - y0[s])))
        cand_lo.append(GM[sel])
        cand_hi.append(GP[sel])
    bp = np.column_stack((np.concatenate(cand_x), np.concatenate(cand_lo), np.concatenate(cand_hi)))
    return CircleMap(bp)


def chi_transform(m):
    """The 45-degree rotated graph: ``t -> t - x`` where ``(x + f-(x))/2 <= t <= (x + f+(x))/2``."""
    px, py = m.vertices()
    t = (px + py) / 2.0
    c = (py - px) / 2.0
    t = t - np.floor(t)
    order = np.argsort(t, kind="stable")
    t, c = t[order], c[order]
    keep = np.concatenate(([True], np.diff(t) > 0.0))
    return ChiFunction(t[keep], c[keep])


def d_map(f, g):
    """Uniform distance between the chi transforms of ``f`` and ``g``."""
    cf, cg = chi_transform(f), chi_transform(g)
    ts = np.union1d(cf.t, cg.t)
    return float(np.max(np.abs(cf(ts) - cg(ts))))


def random_map(rng, n_breakpoints=6, p_jump=0.4, p_flat=0.3):
    """A random valid map with jumps and flats, for property tests."""
    n = int(n_breakpoints)
    x = np.sort(rng.uniform(0.0, 1.0, n))
    while np.any(np.diff(x) < 1e-6):
        x = np.sort(rng.uniform(0.0, 1.0, n))
    jumps = rng.exponential(1.0, n) * (rng.uniform(size=n) < p_jump)
    rises = rng.exponential(1.0, n) * (rng.uniform(size=n) >= p_flat)
    if rises.sum() + jumps.sum() == 0.0:
        rises[0] = 1.0
    total = jumps.sum() + rises.sum()
    jumps /= total
    rises /= total
    ym = np.empty(n)
    yp = np.empty(n)
    level = rng.uniform(-0.5, 0.5) + x[0]
    for i in range(n):
        ym[i] = level
        yp[i] = level + jumps[i]
        level = yp[i] + rises[i]
    return CircleMap(np.column_stack((x, ym, yp)))
