"""Binomial market with trading delay, path indexing and payoff functionals.

Paths of the n-step model are encoded as integers in ``[0, 2**n)``; bit ``i``
holds the move of step ``i + 1`` (1 for an up move, 0 for a down move). The
information available at step ``m`` is therefore the ``m``-bit prefix
``path & ((1 << m) - 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import CapacityError, ConfigError, PayoffError

#: Largest n for which full path enumeration is allowed.
MAX_ENUMERATION_STEPS = 20


@dataclass(frozen=True)
class ModelSpec:
    """n-step binomial model on [0, 1] with a delay of H trading times."""

    s: float
    sigma: float
    n: int
    H: int = 0

    def __post_init__(self) -> None:
        if not (isinstance(self.n, (int, np.integer)) and self.n >= 1):
            raise ConfigError(f"n must be an integer >= 1, got {self.n!r}")
        if not (isinstance(self.H, (int, np.integer)) and self.H >= 0):
            raise ConfigError(f"H must be an integer >= 0, got {self.H!r}")
        if not (math.isfinite(self.s) and self.s > 0):
            raise ConfigError(f"s must be positive, got {self.s!r}")
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ConfigError(f"sigma must be positive, got {self.sigma!r}")

    @property
    def sigma_bar(self) -> float:
        """Upper volatility bound sigma * sqrt(H + 1) of the scaling limit."""
        return self.sigma * math.sqrt(self.H + 1)

    @property
    def log_step(self) -> float:
        return self.sigma / math.sqrt(self.n)

    @property
    def n_paths(self) -> int:
        return 1 << self.n

    def info_step(self, k: int) -> int:
        """Index (k - H)^+ of the information set used for the position at step k."""
        return max(k - self.H, 0)

    def atom_count(self, k: int) -> int:
        return 1 << self.info_step(k)

    def position_count(self) -> int:
        """Number of delayed positions gamma_{k, node}, k = 0..n-1."""
        return sum(self.atom_count(k) for k in range(self.n))


def prefix(path: int, m: int) -> int:
    """The F_m atom of ``path``: its first ``m`` moves."""
    return path & ((1 << m) - 1)


def path_from_moves(moves: Sequence[int]) -> int:
    """Encode a sequence of moves in {-1, +1} as a path index."""
    path = 0
    for i, xi in enumerate(moves):
        if xi not in (-1, 1):
            raise ValueError(f"moves must be +-1, got {xi!r}")
        if xi == 1:
            path |= 1 << i
    return path


def path_moves(path: int, n: int) -> np.ndarray:
    bits = (path >> np.arange(n)) & 1
    return (2 * bits - 1).astype(np.int8)


def stock_path(spec: ModelSpec, path: int) -> np.ndarray:
    """Prices S_0..S_n along ``path``."""
    if not 0 <= path < spec.n_paths:
        raise ValueError(f"path index {path} outside [0, 2**{spec.n})")
    levels = np.concatenate(([0], np.cumsum(path_moves(path, spec.n))))
    return spec.s * np.exp(spec.log_step * levels)


def _check_enumerable(n: int, limit: int = MAX_ENUMERATION_STEPS) -> None:
    if n > limit:
        raise CapacityError(f"path enumeration needs n <= {limit}, got n = {n}", limit)


def all_moves(n: int) -> np.ndarray:
    """Matrix of moves, shape (2**n, n), row = path index."""
    _check_enumerable(n)
    idx = np.arange(1 << n, dtype=np.int64)
    bits = (idx[:, None] >> np.arange(n)) & 1
    return (2 * bits - 1).astype(np.int8)


def all_levels(n: int) -> np.ndarray:
    """Net number of up moves minus down moves, shape (2**n, n + 1)."""
    moves = all_moves(n)
    levels = np.zeros((moves.shape[0], n + 1), dtype=np.int16)
    np.cumsum(moves, axis=1, out=levels[:, 1:])
    return levels


def all_stock_paths(spec: ModelSpec) -> np.ndarray:
    """Price matrix, shape (2**n, n + 1)."""
    return spec.s * np.exp(spec.log_step * all_levels(spec.n))


def crr_measure(spec: ModelSpec) -> float:
    """Up-probability making S^(n) a martingale in its own filtration."""
    a = spec.log_step
    return (1.0 - math.exp(-a)) / (math.exp(a) - math.exp(-a))


def crr_path_probabilities(spec: ModelSpec) -> np.ndarray:
    p = crr_measure(spec)
    ups = ((np.arange(spec.n_paths)[:, None] >> np.arange(spec.n)) & 1).sum(axis=1)
    return p**ups * (1.0 - p) ** (spec.n - ups)


class InterpolatedPath:
    """Piecewise-linear path on [0, 1] through S_0..S_n at the knots k/n."""

    def __init__(self, node_values: Sequence[float]):
        self.node_values = np.asarray(node_values, dtype=float)
        if self.node_values.ndim != 1 or self.node_values.size < 2:
            raise ValueError("need at least two node values")
        self.n = self.node_values.size - 1
        self.knots = np.linspace(0.0, 1.0, self.n + 1)

    def __call__(self, t):
        return np.interp(t, self.knots, self.node_values)

    def max(self) -> float:
        return float(self.node_values.max())

    def integral(self) -> float:
        v = self.node_values
        return float((v[:-1] + v[1:]).sum() / (2.0 * self.n))


# -- payoffs ------------------------------------------------------------------

TERMINAL_KINDS = ("call", "put", "butterfly", "digital_strict", "custom_terminal")
PATH_KINDS = ("lookback_max", "asian_call")
KINDS = TERMINAL_KINDS + PATH_KINDS

_PARAM_NAMES = {
    "call": ("K",),
    "put": ("K",),
    "butterfly": ("K1", "K2", "K3"),
    "digital_strict": ("K",),
    "lookback_max": (),
    "asian_call": ("K",),
    "custom_terminal": ("points",),
}

_DEFAULT_SLOPE = {
    "call": 1.0,
    "put": 0.0,
    "butterfly": 0.0,
    "digital_strict": 0.0,
    "lookback_max": 1.0,
    "asian_call": 1.0,
}

_DEFAULT_LIFT = {"lookback_max": "running_max", "asian_call": "running_trapezoid"}


@dataclass(frozen=True, eq=True)
class PayoffSpec:
    """A payoff functional of the linearly interpolated price path.

    ``asymptotic_slope`` is the declared ``lim sup f(x)/x`` of a terminal
    payoff; for ``custom_terminal`` it also fixes the extrapolation to the
    right of the table (to the left the first value is held constant).
    """

    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    asymptotic_slope: float | None = None
    markov_lift: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown payoff kind {self.kind!r}; expected one of {KINDS}")
        expected = _PARAM_NAMES[self.kind]
        unknown = set(self.params) - set(expected)
        missing = set(expected) - set(self.params)
        if unknown:
            raise ConfigError(f"payoff {self.kind!r}: unknown params {sorted(unknown)}")
        if missing:
            raise ConfigError(f"payoff {self.kind!r}: missing params {sorted(missing)}")
        params = dict(self.params)
        if self.kind == "custom_terminal":
            pts = np.asarray(params["points"], dtype=float)
            if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
                raise ConfigError("custom_terminal points must be a list of >= 2 (x, f(x)) pairs")
            if np.any(np.diff(pts[:, 0]) <= 0) or pts[0, 0] < 0:
                raise ConfigError("custom_terminal x values must be >= 0 and strictly increasing")
            if not np.all(np.isfinite(pts)):
                raise ConfigError("custom_terminal points must be finite")
            params["points"] = tuple((float(x), float(y)) for x, y in pts)
            if self.asymptotic_slope is None:
                raise ConfigError("custom_terminal requires an explicit asymptotic_slope")
        else:
            for name in expected:
                params[name] = float(params[name])
                if not (math.isfinite(params[name]) and params[name] >= 0):
                    raise ConfigError(f"payoff {self.kind!r}: {name} must be finite and >= 0")
        if self.kind == "butterfly" and not (params["K1"] < params["K2"] < params["K3"]):
            raise ConfigError("butterfly needs K1 < K2 < K3")
        if self.kind == "digital_strict" and params["K"] <= 0:
            raise ConfigError("digital_strict needs K > 0")
        object.__setattr__(self, "params", params)
        slope = self.asymptotic_slope
        if slope is None:
            slope = _DEFAULT_SLOPE[self.kind]
        slope = float(slope)
        if not slope >= 0:
            raise ConfigError("asymptotic_slope must be >= 0")
        object.__setattr__(self, "asymptotic_slope", slope)
        if self.markov_lift is None and self.kind in _DEFAULT_LIFT:
            object.__setattr__(self, "markov_lift", _DEFAULT_LIFT[self.kind])

    # constructors
    @classmethod
    def call(cls, K: float) -> PayoffSpec:
        return cls("call", {"K": K})

    @classmethod
    def put(cls, K: float) -> PayoffSpec:
        return cls("put", {"K": K})

    @classmethod
    def butterfly(cls, K1: float, K2: float, K3: float) -> PayoffSpec:
        return cls("butterfly", {"K1": K1, "K2": K2, "K3": K3})

    @classmethod
    def digital_strict(cls, K: float) -> PayoffSpec:
        return cls("digital_strict", {"K": K})

    @classmethod
    def lookback_max(cls) -> PayoffSpec:
        return cls("lookback_max")

    @classmethod
    def asian_call(cls, K: float) -> PayoffSpec:
        return cls("asian_call", {"K": K})

    @classmethod
    def custom_terminal(cls, points: Iterable[tuple[float, float]], asymptotic_slope: float) -> PayoffSpec:
        return cls("custom_terminal", {"points": tuple(points)}, asymptotic_slope)

    # properties
    @property
    def is_terminal(self) -> bool:
        return self.kind in TERMINAL_KINDS

    @property
    def is_continuous(self) -> bool:
        return self.kind != "digital_strict"

    def require_continuous(self) -> None:
        if not self.is_continuous:
            raise PayoffError(
                f"payoff {self.kind!r} is discontinuous; only the envelope pricer accepts it"
            )

    @property
    def lower_bound(self) -> float:
        if self.kind == "custom_terminal":
            return min(y for _, y in self.params["points"])
        return 0.0

    def kinks(self) -> list[float]:
        """Abscissae where a piecewise-linear terminal payoff changes slope."""
        p = self.params
        if self.kind in ("call", "put", "digital_strict"):
            return [p["K"]]
        if self.kind == "butterfly":
            return [p["K1"], p["K2"], p["K3"]]
        if self.kind == "custom_terminal":
            return [x for x, _ in p["points"]]
        raise PayoffError(f"payoff {self.kind!r} is not a terminal payoff")

    def terminal(self, x) -> np.ndarray:
        """Terminal payoff f(x), vectorised."""
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "call":
            return np.maximum(x - p["K"], 0.0)
        if self.kind == "put":
            return np.maximum(p["K"] - x, 0.0)
        if self.kind == "butterfly":
            K1, K2, K3 = p["K1"], p["K2"], p["K3"]
            # (x-K1)^+ - w2 (x-K2)^+ + w3 (x-K3)^+ written as a tent, exactly 0 outside [K1, K3]
            return np.interp(x, [K1, K2, K3], [0.0, K2 - K1, 0.0], left=0.0, right=0.0)
        if self.kind == "digital_strict":
            return (x > p["K"]).astype(float)
        if self.kind == "custom_terminal":
            pts = np.asarray(p["points"])
            xs, ys = pts[:, 0], pts[:, 1]
            out = np.interp(x, xs, ys)
            right = x > xs[-1]
            out = np.where(right, ys[-1] + self.asymptotic_slope * (x - xs[-1]), out)
            return out
        raise PayoffError(f"payoff {self.kind!r} is path dependent")

    def extrapolated(self, prices) -> bool:
        """True if a custom table had to be extrapolated for these prices."""
        if self.kind != "custom_terminal":
            return False
        prices = np.asarray(prices, dtype=float)
        xs = [x for x, _ in self.params["points"]]
        return bool(prices.size and (prices.min() < xs[0] or prices.max() > xs[-1]))

    def evaluate_paths(self, prices) -> np.ndarray:
        """Payoff on each row of an (P, n + 1) price matrix.

        Rows are node values of a path; the functional acts on their linear
        interpolation over [0, 1].
        """
        prices = np.atleast_2d(np.asarray(prices, dtype=float))
        if self.is_terminal:
            return self.terminal(prices[:, -1])
        if self.kind == "lookback_max":
            return prices.max(axis=1)
        # asian_call: trapezoid integral of the interpolated path
        m = prices.shape[1] - 1
        avg = (prices[:, :-1] + prices[:, 1:]).sum(axis=1) / (2.0 * m)
        return np.maximum(avg - self.params["K"], 0.0)

    def to_dict(self) -> dict:
        params = dict(self.params)
        if "points" in params:
            params["points"] = [list(pt) for pt in params["points"]]
        out = {"kind": self.kind, "params": params, "asymptotic_slope": self.asymptotic_slope}
        if self.markov_lift != _DEFAULT_LIFT.get(self.kind):
            out["markov_lift"] = self.markov_lift
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PayoffSpec:
        allowed = {"kind", "params", "asymptotic_slope", "markov_lift"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"payoff: unknown key(s) {sorted(unknown)}")
        if "kind" not in data:
            raise ConfigError("payoff: missing required key 'kind'")
        return cls(
            data["kind"],
            dict(data.get("params", {})),
            data.get("asymptotic_slope"),
            data.get("markov_lift"),
        )


def payoff_eval(spec: ModelSpec, payoff: PayoffSpec, path: int) -> float:
    """F_n on one path: the payoff of the interpolated price path."""
    return float(payoff.evaluate_paths(stock_path(spec, path)[None, :])[0])


def payoff_vector(spec: ModelSpec, payoff: PayoffSpec) -> np.ndarray:
    """F_n on every path, indexed by path."""
    return payoff.evaluate_paths(all_stock_paths(spec))


def crr_price(spec: ModelSpec, payoff: PayoffSpec) -> float:
    """Complete-market price by backward induction under the CRR measure.

    Terminal payoffs use the recombining lattice; path-dependent ones the
    full tree.
    """
    p = crr_measure(spec)
    if payoff.is_terminal:
        j = np.arange(spec.n + 1)
        values = payoff.terminal(spec.s * np.exp(spec.log_step * (2 * j - spec.n)))
        for _ in range(spec.n):
            values = p * values[1:] + (1.0 - p) * values[:-1]
        return float(values[0])
    values = payoff_vector(spec, payoff)
    # last move is the highest bit: pair paths differing only in it
    for k in range(spec.n, 0, -1):
        half = 1 << (k - 1)
        values = (1.0 - p) * values[:half] + p * values[half:]
    return float(values[0])
