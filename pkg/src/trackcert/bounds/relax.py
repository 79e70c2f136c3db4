"""Linear lower/upper bounding lines for scalar primitives and bilinear products."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SLACK = 1e-9
HALF_PI = 0.5 * math.pi


class SingularityError(ValueError):
    """The interval touches a pole of tan or 1/x."""


@dataclass(frozen=True)
class ScalarRelaxation:
    l: float
    u: float
    lower_slope: float
    lower_intercept: float
    upper_slope: float
    upper_intercept: float

    def lower(self, t):
        return self.lower_slope * np.asarray(t) + self.lower_intercept

    def upper(self, t):
        return self.upper_slope * np.asarray(t) + self.upper_intercept


def _sigmoid(x):
    return 0.5 * (1.0 + math.tanh(0.5 * x))


def _softplus(x):
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


# value, first derivative, second derivative
_FUNCS = {
    "sin": (math.sin, math.cos, lambda t: -math.sin(t)),
    "cos": (math.cos, lambda t: -math.sin(t), lambda t: -math.cos(t)),
    "tan": (math.tan, lambda t: 1.0 + math.tan(t) ** 2, lambda t: 2.0 * math.tan(t) * (1.0 + math.tan(t) ** 2)),
    "recip": (lambda t: 1.0 / t, lambda t: -1.0 / (t * t), lambda t: 2.0 / t**3),
    "softplus": (_softplus, _sigmoid, lambda t: _sigmoid(t) * (1.0 - _sigmoid(t))),
    "square": (lambda t: t * t, lambda t: 2.0 * t, lambda t: 2.0),
}


def check_domain(kind: str, l: float, u: float) -> None:
    if kind == "tan":
        # both ends must sit strictly inside the same branch (-pi/2, pi/2) + k*pi
        kl = math.floor((l + HALF_PI) / math.pi)
        ku = math.floor((u + HALF_PI) / math.pi)
        if kl != ku or math.cos(l) == 0.0 or math.cos(u) == 0.0 or (l + HALF_PI) - kl * math.pi <= 0.0:
            raise SingularityError(f"tan interval [{l}, {u}] contains a pole")
    elif kind == "recip":
        if l <= 0.0 <= u:
            raise SingularityError(f"1/x interval [{l}, {u}] contains zero")


def _inflections(kind: str, l: float, u: float) -> list[float]:
    if kind in ("sin", "tan"):
        offset = 0.0
    elif kind == "cos":
        offset = HALF_PI
    else:
        return []
    # consecutive inflections are pi apart, so at most two can fall inside an
    # interval narrower than 2*pi; wider ones are reported as having two
    if u - l >= 2.0 * math.pi:
        return [l, u]
    k0 = math.floor((l - offset) / math.pi) + 1
    return [c for c in (offset + k0 * math.pi, offset + (k0 + 1) * math.pi) if l < c < u]


def exact_range(kind: str, l: float, u: float, slope: float = 0.01) -> tuple[float, float]:
    """Exact min and max of the primitive over [l, u]."""
    if kind == "leaky_relu":
        f = lambda t: t if t >= 0 else slope * t
        return f(l), f(u)
    if kind in ("tan", "recip"):
        check_domain(kind, l, u)
    f = _FUNCS[kind][0]
    if kind in ("tan", "softplus"):
        return f(l), f(u)
    if kind == "recip":
        return 1.0 / u, 1.0 / l
    if kind == "square":
        if l <= 0.0 <= u:
            return 0.0, max(l * l, u * u)
        return min(l * l, u * u), max(l * l, u * u)
    if u - l >= 2.0 * math.pi:
        return -1.0, 1.0
    lo, hi = min(f(l), f(u)), max(f(l), f(u))
    # interior extrema of sin/cos sit where the derivative vanishes
    offset = HALF_PI if kind == "sin" else 0.0
    k = math.floor((l - offset) / math.pi) + 1
    for c in (offset + k * math.pi, offset + (k + 1) * math.pi):
        if l < c < u:
            v = 1.0 if f(c) > 0 else -1.0  # exact extremum, immune to rounding in c
            lo, hi = min(lo, v), max(hi, v)
    if kind in ("sin", "cos"):
        lo, hi = max(lo, -1.0), min(hi, 1.0)
    return lo, hi


def _chord(f, l, u):
    k = (f(u) - f(l)) / (u - l)
    return k, f(l) - k * l


def _tangent(f, f1, t):
    a = f1(t)
    return a, f(t) - a * t


def _s_upper(f, f1, l, c, u):
    """Upper line for f convex on [l, c] and concave on [c, u]."""
    k, b = _chord(f, l, u)
    if k <= f1(u):
        return k, b
    fl = f(l)
    lo, hi = c, u
    # tangent at d passes through (l, f(l)) when h(d) = 0; h is non-decreasing on [c, u]
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if f(mid) + f1(mid) * (l - mid) - fl >= 0.0:
            hi = mid
        else:
            lo = mid
    a, b = _tangent(f, f1, hi)
    b += max(0.0, fl - (a * l + b))
    return a, b


def _s_lines(f, f1, l, c, u):
    """(lower, upper) lines for f convex on [l, c], concave on [c, u]."""
    upper = _s_upper(f, f1, l, c, u)
    # reflect: q(t) = -f(-t) is again convex-then-concave on [-u, -l]
    q = lambda t: -f(-t)
    q1 = lambda t: f1(-t)
    a, b = _s_upper(q, q1, -u, -c, -l)
    return (a, -b), upper


def relax_scalar(kind: str, l: float, u: float, params: dict | None = None) -> ScalarRelaxation:
    """Sound bounding lines for ``kind`` over ``[l, u]``.

    Constant-convexity intervals get chord plus midpoint tangent, a single
    inflection gets the tangent-through-endpoint construction, and anything
    wigglier falls back to constant lines at the exact range.
    """
    params = params or {}
    l, u = float(l), float(u)
    if not l <= u:
        raise ValueError(f"empty interval [{l}, {u}]")
    if not (math.isfinite(l) and math.isfinite(u)):
        raise SingularityError(f"non-finite interval [{l}, {u}]")

    if kind == "leaky_relu":
        s = float(params.get("slope", 0.01))
        aL, bL, aU, bU = _leaky_lines(s, np.array([l]), np.array([u]))
        return ScalarRelaxation(l, u, float(aL[0]), float(bL[0]), float(aU[0]), float(bU[0]))
    if kind not in _FUNCS:
        raise ValueError(f"no relaxation for primitive {kind!r}")
    check_domain(kind, l, u)
    f, f1, f2 = _FUNCS[kind]

    if u == l:
        lower = upper = _tangent(f, f1, l)
    else:
        infl = _inflections(kind, l, u)
        if len(infl) >= 2:
            lo, hi = exact_range(kind, l, u)
            lower, upper = (0.0, lo), (0.0, hi)
        elif len(infl) == 1:
            c = infl[0]
            if f2(0.5 * (l + c)) >= 0.0:
                lower, upper = _s_lines(f, f1, l, c, u)
            else:
                # -f is convex then concave
                g = lambda t: -f(t)
                g1 = lambda t: -f1(t)
                (a1, b1), (a2, b2) = _s_lines(g, g1, l, c, u)
                lower, upper = (-a2, -b2), (-a1, -b1)
        else:
            m = 0.5 * (l + u)
            if f2(m) >= 0.0:
                lower, upper = _tangent(f, f1, m), _chord(f, l, u)
            else:
                lower, upper = _chord(f, l, u), _tangent(f, f1, m)

    span = max(abs(l), abs(u))
    slack = params.get("slack", SLACK)
    lo_pad = slack * (1.0 + abs(lower[1]) + abs(lower[0]) * span)
    hi_pad = slack * (1.0 + abs(upper[1]) + abs(upper[0]) * span)
    return ScalarRelaxation(l, u, lower[0], lower[1] - lo_pad, upper[0], upper[1] + hi_pad)


def _leaky_lines(s, l, u, slack=SLACK):
    aL = np.where(l >= 0, 1.0, s)
    aU = aL.copy()
    bL = np.zeros_like(l)
    bU = np.zeros_like(l)
    cross = (l < 0) & (u > 0)
    if np.any(cross):
        lc, uc = l[cross], u[cross]
        k = (uc - s * lc) / (uc - lc)
        aU[cross] = k
        bU[cross] = uc - k * uc + slack * (1.0 + np.abs(uc))
        # lower line through the origin; slope 1 when the positive side dominates
        aL[cross] = np.where(uc >= -lc, 1.0, s)
    aL = np.where(u <= 0, s, aL)
    aU = np.where(u <= 0, s, aU)
    return aL, bL, aU, bU


def relax_arrays(kind: str, l, u, params: dict | None = None):
    """Element-wise lines ``(aL, bL, aU, bU)`` for interval vectors."""
    l = np.asarray(l, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if kind == "leaky_relu":
        return _leaky_lines(float((params or {}).get("slope", 0.01)), l, u)
    out = np.empty((4,) + l.shape)
    for i in np.ndindex(l.shape):
        r = relax_scalar(kind, l[i], u[i], params)
        out[(slice(None),) + i] = (r.lower_slope, r.lower_intercept, r.upper_slope, r.upper_intercept)
    return out[0], out[1], out[2], out[3]


@dataclass(frozen=True)
class BilinearRelaxation:
    """Planes ``z = ca*a + cb*b + c0`` bounding ``z = a*b`` on a box."""

    under: tuple  # two (ca, cb, c0) triples
    over: tuple

    def lower(self, a, b):
        return np.maximum(*(ca * a + cb * b + c0 for ca, cb, c0 in self.under))

    def upper(self, a, b):
        return np.minimum(*(ca * a + cb * b + c0 for ca, cb, c0 in self.over))


def mccormick_relax(a_box, b_box) -> BilinearRelaxation:
    """Standard McCormick envelope; ``a_box``/``b_box`` are (lo, hi) pairs (scalars or arrays)."""
    aL, aU = (np.asarray(v, dtype=np.float64) for v in a_box)
    bL, bU = (np.asarray(v, dtype=np.float64) for v in b_box)
    under = ((bL, aL, -aL * bL), (bU, aU, -aU * bU))
    over = ((bL, aU, -aU * bL), (bU, aL, -aL * bU))
    return BilinearRelaxation(under, over)


def mccormick_mid(aL, aU, bL, bU, slack=SLACK):
    """Averages of the two under-planes and of the two over-planes.

    Returns ``(ca, cb, c0_lower, c0_upper)``: both planes share the slopes
    ``ca = (bL+bU)/2`` and ``cb = (aL+aU)/2``.  Exact when either factor is a point.
    """
    ca = 0.5 * (bL + bU)
    cb = 0.5 * (aL + aU)
    c0_lo = -0.5 * (aL * bL + aU * bU)
    c0_hi = -0.5 * (aU * bL + aL * bU)
    mag = np.maximum.reduce([np.abs(aL * bL), np.abs(aU * bU), np.abs(aU * bL), np.abs(aL * bU)])
    degenerate = (aL == aU) | (bL == bU)
    pad = np.where(degenerate, 0.0, slack * (1.0 + mag))
    return ca, cb, c0_lo - pad, c0_hi + pad
