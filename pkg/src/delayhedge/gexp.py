"""G-expectation with volatility interval [0, sigma_bar] on [0, 1].

Terminal payoffs are priced with an explicit finite-difference scheme for

    v_t + 1/2 sigma_bar^2 (v_yy - v_y)^+ = 0,   y = ln S,

and path-dependent payoffs with a volatility-control dynamic programme on a
log-price lattice, lifted by a running statistic (see ``MarkovLift``).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import ndtr

from .errors import CapacityError, ConfigError, PayoffError
from .model import ModelSpec, PayoffSpec

#: Size guard of the exhaustive control search.
BRUTE_FORCE_MAX_STEPS = 8
BRUTE_FORCE_MAX_LEVELS = 3


def bs_closed_form(kind: str, s: float, K: float, vol: float, T: float = 1.0) -> float:
    """Zero-rate Black-Scholes price of a call or put."""
    if kind not in ("call", "put"):
        raise ConfigError(f"bs_closed_form supports call and put, not {kind!r}")
    if vol < 0 or T < 0:
        raise ConfigError("vol and T must be >= 0")
    sd = vol * math.sqrt(T)
    if sd == 0.0 or K == 0.0:
        call = max(s - K, 0.0)
    else:
        d1 = (math.log(s / K) + 0.5 * sd * sd) / sd
        call = s * float(ndtr(d1)) - K * float(ndtr(d1 - sd))
    return call if kind == "call" else call - s + K


@dataclass(frozen=True)
class GExpProblem:
    """sup E[payoff(S)] over martingales S_t = s exp(B_t - <B>_t / 2), d<B>/dt <= sigma_bar^2."""

    s: float
    sigma_bar: float
    payoff: PayoffSpec

    def __post_init__(self) -> None:
        if not (math.isfinite(self.s) and self.s > 0):
            raise ConfigError(f"s must be positive, got {self.s!r}")
        if not (math.isfinite(self.sigma_bar) and self.sigma_bar > 0):
            raise ConfigError(f"sigma_bar must be positive, got {self.sigma_bar!r}")

    @classmethod
    def from_model(cls, spec: ModelSpec, payoff: PayoffSpec) -> GExpProblem:
        return cls(spec.s, spec.sigma_bar, payoff)


# -- PDE ----------------------------------------------------------------------


@dataclass(frozen=True)
class PdeGrid:
    """Uniform log-price grid of half-width ``width * sigma_bar`` around ln s.

    ``n_t = None`` picks the smallest step count with dt at most
    ``cfl_fraction`` of the stability limit.
    """

    width: float = 6.0
    n_y: int = 801
    n_t: int | None = None
    scheme: str = "explicit"
    cfl_fraction: float = 0.9

    def __post_init__(self) -> None:
        if self.scheme != "explicit":
            raise ConfigError(f"unknown PDE scheme {self.scheme!r}")
        if self.n_y < 5 or self.n_y % 2 == 0:
            raise ConfigError("n_y must be odd and >= 5 (ln s is the middle node)")
        if not self.width > 0:
            raise ConfigError("width must be positive")
        if not 0 < self.cfl_fraction <= 1:
            raise ConfigError("cfl_fraction must lie in (0, 1]")
        if self.n_t is not None and self.n_t < 1:
            raise ConfigError("n_t must be >= 1")

    def dy(self, sigma_bar: float) -> float:
        return 2.0 * self.width * sigma_bar / (self.n_y - 1)

    def dt_limit(self, sigma_bar: float) -> float:
        """Largest stable step: dy^2 / (sigma_bar^2 + sigma_bar dy)."""
        dy = self.dy(sigma_bar)
        return dy * dy / (sigma_bar * sigma_bar + sigma_bar * dy)

    def steps(self, sigma_bar: float, T: float = 1.0) -> int:
        if self.n_t is not None:
            return self.n_t
        return max(1, math.ceil(T / (self.cfl_fraction * self.dt_limit(sigma_bar))))

    def nodes(self, s: float, sigma_bar: float) -> np.ndarray:
        half = self.width * sigma_bar
        return math.log(s) + np.linspace(-half, half, self.n_y)

    def to_dict(self) -> dict:
        return {"width": self.width, "n_y": self.n_y, "n_t": self.n_t, "scheme": self.scheme}


@dataclass(frozen=True)
class GExpResult:
    value: float
    scheme: str
    grid: dict
    clamp_count: int = 0
    cfl_margin: float | None = None
    interp_tol: float = 0.0

    @property
    def degraded(self) -> bool:
        return self.clamp_count > 0

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "scheme": self.scheme,
            "grid": self.grid,
            "clamp_count": self.clamp_count,
            "cfl_margin": self.cfl_margin,
            "interp_tol": self.interp_tol,
        }


def bsb_pde_price(problem: GExpProblem, grid: PdeGrid | None = None) -> GExpResult:
    """Explicit backward scheme for the positive-part BSB equation; value at ln s.

    Central differences in y, linear extrapolation (v_yy = 0) at both ends.
    """
    grid = grid or PdeGrid()
    payoff = problem.payoff
    if not payoff.is_terminal:
        raise PayoffError(
            f"payoff {payoff.kind!r} is path dependent; use control_dp_price with a MarkovLift"
        )
    payoff.require_continuous()
    sb = problem.sigma_bar
    dy = grid.dy(sb)
    n_t = grid.steps(sb)
    dt = 1.0 / n_t
    limit = grid.dt_limit(sb)
    if dt > limit:
        raise ConfigError(f"CFL violated: dt = {dt:.3g} > {limit:.3g}; increase n_t or coarsen n_y")
    y = grid.nodes(problem.s, sb)
    v = np.asarray(payoff.terminal(np.exp(y)), dtype=float).copy()
    lam = 0.5 * sb * sb * dt
    a2, a1 = 1.0 / (dy * dy), 0.5 / dy
    for _ in range(n_t):
        d2 = (v[2:] - 2.0 * v[1:-1] + v[:-2]) * a2
        d1 = (v[2:] - v[:-2]) * a1
        v[1:-1] += lam * np.maximum(d2 - d1, 0.0)
        v[0] = 2.0 * v[1] - v[2]
        v[-1] = 2.0 * v[-2] - v[-3]
    info = grid.to_dict() | {"n_t": n_t, "dy": dy, "dt": dt}
    return GExpResult(
        value=float(v[grid.n_y // 2]),
        scheme="explicit_bsb",
        grid=info,
        clamp_count=0,
        cfl_margin=1.0 - dt / limit,
    )


# -- Markov lifts and the control DP ------------------------------------------


@dataclass(frozen=True)
class MarkovLift:
    """Running statistic A with A_{k+1} = u(A_k, S_k, S_{k+1}) and payoff phi(S_m, A_m).

    Built-ins: ``terminal`` (no statistic), ``running_max`` (A = max of the
    node prices, kept on the price lattice, so exact) and
    ``running_trapezoid`` (A = trapezoid integral of the interpolated path,
    on ``n_stat`` points over [0, max lattice price], linear interpolation;
    the default is max(2 m L + 1, 513) points).
    """

    name: str
    n_stat: int | None = None

    BUILTINS = ("terminal", "running_max", "running_trapezoid")

    def __post_init__(self) -> None:
        if self.name not in self.BUILTINS:
            raise ConfigError(f"unknown Markov lift {self.name!r}; expected one of {self.BUILTINS}")
        if self.n_stat is not None and self.n_stat < 3:
            raise ConfigError("n_stat must be >= 3")

    @classmethod
    def for_payoff(cls, payoff: PayoffSpec, n_stat: int | None = None) -> MarkovLift:
        if payoff.is_terminal:
            return cls("terminal")
        if payoff.markov_lift is None:
            raise PayoffError(f"payoff {payoff.kind!r} declares no Markov lift")
        return cls(payoff.markov_lift, n_stat)

    def check(self, payoff: PayoffSpec) -> None:
        expected = "terminal" if payoff.is_terminal else payoff.markov_lift
        if self.name != expected:
            raise PayoffError(f"lift {self.name!r} cannot represent payoff {payoff.kind!r}")

    def initial(self, s: float) -> float:
        return s if self.name == "running_max" else 0.0

    def update(self, A, S, S_next, m: int):
        if self.name == "running_max":
            return np.maximum(A, S_next)
        if self.name == "running_trapezoid":
            return A + (S + S_next) / (2.0 * m)
        return A

    def terminal(self, S, A, payoff: PayoffSpec):
        if self.name == "terminal":
            return payoff.terminal(S)
        if payoff.kind == "lookback_max":
            return np.asarray(A, dtype=float)
        return np.maximum(np.asarray(A, dtype=float) - payoff.params["K"], 0.0)

    def evaluate_path(self, prices, payoff: PayoffSpec) -> float:
        """phi(S_m, A_m) after running the recursion along one node-price path."""
        prices = np.asarray(prices, dtype=float)
        m = prices.size - 1
        A = self.initial(prices[0])
        for k in range(m):
            A = self.update(A, prices[k], prices[k + 1], m)
        return float(self.terminal(prices[-1], A, payoff))


def _up_probabilities(delta: float, L: int) -> np.ndarray:
    """Martingale up-probability for a move of l lattice steps, l = 0..L (l = 0 unused)."""
    p = np.full(L + 1, 0.5)
    lv = np.arange(1, L + 1) * delta
    p[1:] = (1.0 - np.exp(-lv)) / (np.exp(lv) - np.exp(-lv))
    return p


def _dp_terminal(problem, m, L, delta, p):
    s = problem.s
    i = np.arange(-m * L, m * L + 1)
    v = problem.payoff.terminal(s * np.exp(delta * i))
    for k in range(m - 1, -1, -1):
        # v covers |i| <= (k+1) L; the new slice covers |i| <= k L
        c = (k + 1) * L
        best = v[c - k * L : c + k * L + 1].copy()
        for l in range(1, L + 1):
            up = v[c - k * L + l : c + k * L + 1 + l]
            dn = v[c - k * L - l : c + k * L + 1 - l]
            np.maximum(best, p[l] * up + (1.0 - p[l]) * dn, out=best)
        v = best
    return float(v[0]), 0, 0.0


def _dp_running_max(problem, m, L, delta, p):
    # state (i, j): price index i, max index j >= max(i, 0); j on the same lattice
    s = problem.s
    J = m * L
    jj = np.arange(J + 1)
    v = np.broadcast_to(s * np.exp(delta * jj), (2 * J + 1, J + 1)).copy()
    for k in range(m - 1, -1, -1):
        c_old, c_new = (k + 1) * L, k * L
        i_new = np.arange(-c_new, c_new + 1)
        jmax = c_new  # reachable max index at step k
        cols = jj[: jmax + 1]
        best = v[i_new + c_old][:, cols].copy()
        for l in range(1, L + 1):
            iu = i_new + l
            ju = np.maximum(cols[None, :], iu[:, None])
            up = v[(iu + c_old)[:, None], ju]
            dn = v[(i_new - l + c_old)][:, cols]
            np.maximum(best, p[l] * up + (1.0 - p[l]) * dn, out=best)
        v = np.zeros((2 * c_new + 1, J + 1))
        v[:, : jmax + 1] = best
    return float(v[0, 0]), 0, 0.0


def _dp_trapezoid(problem, m, L, delta, p, n_stat):
    s = problem.s
    J = m * L
    lattice = s * np.exp(delta * np.arange(-J, J + 1))
    a_max = float(lattice.max())
    grid = np.linspace(0.0, a_max, n_stat)
    dA = grid[1] - grid[0]
    # largest reachable statistic after k steps
    top = s * np.exp(delta * L * np.arange(m + 1))
    reach = np.concatenate(([0.0], np.cumsum((top[:-1] + top[1:]) / (2.0 * m))))
    v = np.broadcast_to(np.maximum(grid - problem.payoff.params["K"], 0.0), (2 * J + 1, n_stat)).copy()
    clamps = 0

    def interp(rows, A):
        # linear interpolation of v[rows, .] at statistic values A (same shape)
        over = A > a_max
        pos = np.clip(A / dA, 0.0, n_stat - 1.0)
        lo = np.minimum(pos.astype(np.int64), n_stat - 2)
        w = pos - lo
        r = rows[:, None]
        out = (1.0 - w) * v[r, lo] + w * v[r, lo + 1]
        return out, over

    for k in range(m - 1, -1, -1):
        c_old, c_new = (k + 1) * L, k * L
        i_new = np.arange(-c_new, c_new + 1)
        S = lattice[i_new + J]
        live = grid <= reach[k] + dA
        base = grid[None, :]
        best, over = interp(i_new + c_old, np.broadcast_to(base + S[:, None] / m, (i_new.size, n_stat)))
        hit = over
        for l in range(1, L + 1):
            Su = lattice[i_new + l + J]
            Sd = lattice[i_new - l + J]
            up, ou = interp(i_new + l + c_old, base + (S + Su)[:, None] / (2.0 * m))
            dn, od = interp(i_new - l + c_old, base + (S + Sd)[:, None] / (2.0 * m))
            np.maximum(best, p[l] * up + (1.0 - p[l]) * dn, out=best)
            hit = hit | ou | od
        clamps += int(hit[:, live].sum())
        v = best
    # value at A_0 = 0 is the first grid node
    return float(v[0, 0]), clamps, None


def control_dp_price(
    problem: GExpProblem,
    lift: MarkovLift | None = None,
    m: int = 64,
    L: int = 8,
    estimate_tol: bool = True,
) -> GExpResult:
    """Volatility-control DP with controls a in {0, sigma_bar/L, ..., sigma_bar}.

    The log-price lattice has step sigma_bar / (L sqrt(m)), so every child
    e^{+-a/sqrt(m)} S of a lattice price is again a lattice price and only
    the running-trapezoid statistic is interpolated. Its interpolation
    tolerance is estimated by repeating the DP on a statistic grid of half
    the resolution.
    """
    if m < 1 or L < 1:
        raise ConfigError("m and L must be >= 1")
    payoff = problem.payoff
    payoff.require_continuous()
    lift = lift or MarkovLift.for_payoff(payoff)
    lift.check(payoff)
    delta = problem.sigma_bar / (L * math.sqrt(m))
    p = _up_probabilities(delta, L)
    tol = 0.0
    if lift.name == "terminal":
        value, clamps, _ = _dp_terminal(problem, m, L, delta, p)
    elif lift.name == "running_max":
        value, clamps, _ = _dp_running_max(problem, m, L, delta, p)
    else:
        n_stat = lift.n_stat or max(2 * m * L + 1, 513)
        value, clamps, _ = _dp_trapezoid(problem, m, L, delta, p, n_stat)
        if estimate_tol:
            coarse, _, _ = _dp_trapezoid(problem, m, L, delta, p, (n_stat + 1) // 2)
            tol = abs(value - coarse)
    info: dict[str, Any] = {"m": m, "L": L, "lattice_step": delta, "lift": lift.name}
    if lift.name == "running_trapezoid":
        info["n_stat"] = lift.n_stat or max(2 * m * L + 1, 513)
    return GExpResult(value=value, scheme="control_dp", grid=info, clamp_count=clamps, interp_tol=tol)


def brute_force_control_oracle(problem: GExpProblem, m: int, L: int) -> float:
    """Exhaustive adapted volatility control on the non-recombining tree.

    Every history of signed moves in {-L..L} lattice steps is enumerated;
    the payoff is evaluated on each node-price path and the best control
    is chosen node by node, backwards.
    """
    if m > BRUTE_FORCE_MAX_STEPS or L > BRUTE_FORCE_MAX_LEVELS:
        raise CapacityError(
            f"brute-force oracle limited to m <= {BRUTE_FORCE_MAX_STEPS}, L <= {BRUTE_FORCE_MAX_LEVELS}",
            BRUTE_FORCE_MAX_STEPS,
        )
    if m < 1 or L < 1:
        raise ConfigError("m and L must be >= 1")
    payoff = problem.payoff
    payoff.require_continuous()
    delta = problem.sigma_bar / (L * math.sqrt(m))
    p = _up_probabilities(delta, L)
    b = 2 * L + 1
    moves = np.arange(-L, L + 1)
    head = min(m, 2)
    tail = m - head
    tail_inc = (
        np.array(list(itertools.product(moves, repeat=tail)), dtype=float).reshape(-1, tail)
        if tail
        else np.zeros((1, 0))
    )
    leaves = []
    for prefix in itertools.product(moves, repeat=head):
        inc = np.hstack([np.broadcast_to(np.array(prefix, float), (tail_inc.shape[0], head)), tail_inc])
        levels = np.hstack([np.zeros((inc.shape[0], 1)), np.cumsum(inc, axis=1)])
        leaves.append(payoff.evaluate_paths(problem.s * np.exp(delta * levels)))
    v = np.concatenate(leaves).reshape((b,) * m)
    for _ in range(m):
        best = v[..., L].copy()
        for l in range(1, L + 1):
            np.maximum(best, p[l] * v[..., L + l] + (1.0 - p[l]) * v[..., L - l], out=best)
        v = best
    return float(v)
