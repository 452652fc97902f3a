"""Least concave majorant of a terminal payoff on [0, inf) and the buy-and-hold hedge.

Under a constant trading delay in the Black-Scholes model the super-hedging
price of f(S_1) is the concave envelope f^ evaluated at the spot, and
holding d+f^(s) shares from time 0 super-replicates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError
from .model import PayoffSpec


@dataclass(frozen=True)
class PayoffCurve:
    """Samples 0 = x_0 < ... < x_m of a payoff, with a declared slope at infinity.

    Between samples f is linear except at ``jumps``: for each jump point x_j
    the pair (left, right) holds the one-sided limits, and the value at x_j
    is their minimum (lower semi-continuous). Beyond x_m, f continues
    linearly with slope ``slope``. ``shift`` is the constant subtracted so
    that all sample values are >= 0; prices add it back.
    """

    x: np.ndarray
    y: np.ndarray
    slope: float
    jumps: tuple[tuple[float, float, float], ...] = ()
    shift: float = 0.0
    func: Callable | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or x.size < 1:
            raise ConfigError("curve needs matching 1-d x and y arrays")
        if x[0] != 0.0 or np.any(np.diff(x) <= 0):
            raise ConfigError("curve abscissae must start at 0 and increase strictly")
        if not np.all(np.isfinite(y)):
            raise ConfigError("curve values must be finite")
        if np.any(y < 0):
            raise ConfigError("curve values must be >= 0; shift bounded-below payoffs first")
        if not (self.slope >= 0):
            raise ConfigError("asymptotic slope must be >= 0 (or inf)")
        for xj, left, right in self.jumps:
            if xj not in set(x.tolist()):
                raise ConfigError(f"jump point {xj} must be a sample point")
            if min(left, right) < 0:
                raise ConfigError("jump limits must be >= 0")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_payoff(cls, payoff: PayoffSpec, x_max: float | None = None) -> PayoffCurve:
        """Exact sampled representation of a built-in terminal payoff."""
        kinks = sorted(set(payoff.kinks()))
        top = max(kinks) if kinks else 1.0
        x_max = x_max or 2.0 * top + 1.0
        xs = np.array(sorted({0.0, *kinks, x_max}))
        shift = min(payoff.lower_bound, 0.0)
        ys = payoff.terminal(xs) - shift
        jumps: tuple = ()
        if payoff.kind == "digital_strict":
            K = payoff.params["K"]
            jumps = ((K, 0.0 - shift, 1.0 - shift),)

        def func(v, _p=payoff, _c=shift):
            return _p.terminal(v) - _c

        return cls(xs, ys, payoff.asymptotic_slope, jumps, shift, func)

    def hull_points(self) -> tuple[np.ndarray, np.ndarray]:
        """Sample points with jump values replaced by their lim-sup."""
        y = self.y.copy()
        for xj, left, right in self.jumps:
            y[np.searchsorted(self.x, xj)] = max(left, right)
        return self.x, y

    def __call__(self, v):
        """f(v) - shift; exact for curves built from a payoff."""
        v = np.asarray(v, dtype=float)
        if self.func is not None:
            return np.asarray(self.func(v), dtype=float)
        out = np.interp(v, self.x, self.y)
        for xj, left, right in self.jumps:
            i = np.searchsorted(self.x, xj)
            if i + 1 < self.x.size:
                seg = (v > xj) & (v < self.x[i + 1])
                w = (v - xj) / (self.x[i + 1] - xj)
                out = np.where(seg, right + w * (self.y[i + 1] - right), out)
            if i > 0:
                seg = (v < xj) & (v > self.x[i - 1])
                w = (xj - v) / (xj - self.x[i - 1])
                out = np.where(seg, left + w * (self.y[i - 1] - left), out)
        if math.isfinite(self.slope):
            out = np.where(v > self.x[-1], self.y[-1] + self.slope * (v - self.x[-1]), out)
        return out


@dataclass(frozen=True)
class EnvelopeResult:
    """f^ on [0, inf): hull vertices, then a ray of slope ``slope`` from the last one."""

    vx: np.ndarray
    vy: np.ndarray
    slope: float
    finite: bool
    shift: float = 0.0

    def value_at(self, x):
        """f^(x) + shift; inf when the envelope is infinite."""
        x = np.asarray(x, dtype=float)
        if not self.finite:
            return np.full(x.shape, math.inf)
        out = np.interp(x, self.vx, self.vy)
        out = np.where(x > self.vx[-1], self.vy[-1] + self.slope * (x - self.vx[-1]), out)
        return out + self.shift

    def right_derivative_at(self, x):
        """Slope of the hull segment to the right of x (the ray slope beyond the last vertex)."""
        x = np.asarray(x, dtype=float)
        if not self.finite:
            return np.full(x.shape, math.nan)
        slopes = np.append(np.diff(self.vy) / np.diff(self.vx), self.slope)
        idx = np.searchsorted(self.vx, x, side="right") - 1
        return slopes[np.clip(idx, 0, slopes.size - 1)]

    def vertices(self) -> list[list[float]]:
        return [[float(a), float(b + self.shift)] for a, b in zip(self.vx, self.vy)]


def _upper_hull(x: np.ndarray, y: np.ndarray) -> list[int]:
    """Indices of the upper hull of points sorted by x (monotone chain)."""
    hull: list[int] = []
    for i in range(x.size):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            # drop b unless it lies strictly above the chord a-i
            cross = (x[b] - x[a]) * (y[i] - y[a]) - (y[b] - y[a]) * (x[i] - x[a])
            if cross >= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    return hull


def concave_envelope(curve: PayoffCurve) -> EnvelopeResult:
    """Least concave majorant on [0, inf).

    Any concave majorant has all slopes >= lambda, so beyond the sample
    maximizing y - lambda x (leftmost on ties) it is at least the ray of
    slope lambda through that point, and every later sample lies below
    that ray. Before it, the envelope is the upper hull of the samples.
    """
    x, y = curve.hull_points()
    lam = curve.slope
    if not math.isfinite(lam):
        return EnvelopeResult(x[:1], y[:1], math.inf, False, curve.shift)
    score = y - lam * x
    star = int(np.flatnonzero(score >= score.max())[0])
    idx = _upper_hull(x[: star + 1], y[: star + 1])
    return EnvelopeResult(x[idx], y[idx], lam, True, curve.shift)


@dataclass(frozen=True)
class DelayBsParams:
    """Black-Scholes inputs with a constant delay h (years); only the verifier uses sigma, mu, h."""

    s: float
    sigma: float
    mu: float = 0.0
    h: float = 0.1

    def __post_init__(self) -> None:
        for name in ("s", "sigma", "h"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be positive, got {v!r}")
        if not math.isfinite(self.mu):
            raise ConfigError("mu must be finite")


def delay_bs_price(curve: PayoffCurve, params: DelayBsParams) -> tuple[float, float]:
    """(f^(s), d+f^(s)); sigma, mu and h do not enter."""
    env = concave_envelope(curve)
    if not env.finite:
        return math.inf, math.nan
    return float(env.value_at(params.s)), float(env.right_derivative_at(params.s))


@dataclass(frozen=True)
class ShortfallReport:
    max_shortfall: float
    trials: int
    seed: int

    def to_json(self) -> dict:
        return {"max_shortfall": self.max_shortfall, "trials": self.trials, "seed": self.seed}


def verify_buy_and_hold(
    curve: PayoffCurve, params: DelayBsParams, trials: int = 100_000, seed: int = 0
) -> ShortfallReport:
    """max over draws of f(S_1) - (V + gamma (S_1 - s)), S_1 = s exp(sigma Z + mu)."""
    V, gamma = delay_bs_price(curve, params)
    if not math.isfinite(V):
        raise ConfigError("buy-and-hold verification needs a finite envelope")
    rng = np.random.default_rng(seed)
    S1 = params.s * np.exp(params.sigma * rng.standard_normal(trials) + params.mu)
    # curve(.) and V both exclude the shift
    gap = curve(S1) - (V - curve.shift + gamma * (S1 - params.s))
    return ShortfallReport(float(gap.max()), trials, seed)
