"""Explicit feasible measures for the delayed binomial model, built block by block.

Time points are labelled U1 (martingale step), U2 (momentum: conditional
mean c (S_k - S_{k-1})) or U3 (reversion: -c (S_k - S_{k-1})), with
c = 1 - 1/sqrt(n). Each interval I_j of a volatility schedule is cut into
[sqrt n]-point blocks, each block into sub-blocks of 2H + 2 points; the
first A_j sub-blocks of a block are momentum sub-blocks, the others
reversion sub-blocks. Every H + 1 consecutive points contain a U1 point,
which makes the measure satisfy the delayed martingale constraints.

Any such measure gives a lower bound E_Q[F_n] <= V_n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence, Union

import numpy as np

from .errors import CapacityError, ConfigError, InfeasibleConstructionError
from .model import MAX_ENUMERATION_STEPS, ModelSpec, PayoffSpec, all_stock_paths, crr_measure

U1, U2, U3 = 1, 2, 3

#: Up-probabilities must lie in (PROB_MARGIN, 1 - PROB_MARGIN).
PROB_MARGIN = 1e-9

Rho = Union[float, str, Callable[[np.ndarray], float]]


@dataclass(frozen=True)
class VolSchedule:
    """Piecewise-constant volatility: rho[j] on [t_j, t_{j+1}).

    Each entry is a number, ``"max"`` (= sigma sqrt(H + 1)) or a callable
    of the observed prices (S at [n t_1], ..., [n t_j]).
    """

    partition: tuple[float, ...]
    rho: tuple[Rho, ...]
    epsilon: float = 1e-6

    def __post_init__(self) -> None:
        t = tuple(float(v) for v in self.partition)
        if len(t) < 2 or t[0] != 0.0 or t[-1] != 1.0 or any(b <= a for a, b in zip(t, t[1:])):
            raise ConfigError("partition must increase strictly from 0 to 1")
        if len(self.rho) != len(t) - 1:
            raise ConfigError(f"need {len(t) - 1} rho entries, got {len(self.rho)}")
        for r in self.rho:
            if isinstance(r, str) and r != "max":
                raise ConfigError(f"rho entry {r!r} must be a number, 'max' or a callable")
            if not isinstance(r, str) and not callable(r) and not math.isfinite(float(r)):
                raise ConfigError("rho entries must be finite")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        object.__setattr__(self, "partition", t)
        object.__setattr__(self, "rho", tuple(r if isinstance(r, str) or callable(r) else float(r) for r in self.rho))

    @classmethod
    def constant(cls, rho: Rho = "max") -> VolSchedule:
        return cls((0.0, 1.0), (rho,))

    @classmethod
    def from_dict(cls, data: dict) -> VolSchedule:
        unknown = set(data) - {"partition", "rho", "epsilon"}
        if unknown:
            raise ConfigError(f"schedule: unknown key(s) {sorted(unknown)}")
        if "partition" not in data or "rho" not in data:
            raise ConfigError("schedule needs 'partition' and 'rho'")
        return cls(tuple(data["partition"]), tuple(data["rho"]), data.get("epsilon", 1e-6))

    def to_dict(self) -> dict:
        if any(callable(r) for r in self.rho):
            raise ConfigError("price-dependent schedules are not serializable")
        return {"partition": list(self.partition), "rho": list(self.rho), "epsilon": self.epsilon}

    @property
    def is_constant(self) -> bool:
        return not any(callable(r) for r in self.rho)

    @property
    def J(self) -> int:
        return len(self.rho)

    def value(self, spec: ModelSpec, j: int, observed: Sequence[float] = ()) -> float:
        """rho_j, checked against [epsilon, sigma sqrt(H + 1)]."""
        r = self.rho[j]
        if r == "max":
            v = spec.sigma_bar
        elif callable(r):
            v = float(r(np.asarray(observed, dtype=float)))
        else:
            v = float(r)
        if not (self.epsilon <= v <= spec.sigma_bar * (1 + 1e-12)):
            raise ConfigError(
                f"rho_{j} = {v:.6g} outside [epsilon, sigma sqrt(H+1)] = [{self.epsilon:.3g}, {spec.sigma_bar:.6g}]"
            )
        return v

    def bounds(self, n: int) -> list[int]:
        """Interval ends [n t_j]."""
        return [int(math.floor(n * t + 1e-12)) for t in self.partition]


@dataclass(frozen=True)
class MomentumCount:
    count: int
    raw: float
    cap: int

    @property
    def clamped(self) -> bool:
        return math.floor(self.raw) > self.cap


def momentum_count(spec: ModelSpec, schedule: VolSchedule, j: int, observed: Sequence[float] = ()) -> MomentumCount:
    """A_j = rho_j^2 sqrt(n) / (2 sigma^2 (H + 1)^2), floored and clamped to [0, [sqrt n / (2H + 2)]]."""
    rho = schedule.value(spec, j, observed)
    raw = rho * rho * math.sqrt(spec.n) / (2.0 * spec.sigma**2 * (spec.H + 1) ** 2)
    cap = math.isqrt(spec.n) // (2 * spec.H + 2)
    count = min(max(int(math.floor(raw + 1e-12)), 0), cap)
    return MomentumCount(count, raw, cap)


def a_n_j(spec: ModelSpec, schedule: VolSchedule, j: int, observed: Sequence[float] = ()) -> int:
    return momentum_count(spec, schedule, j, observed).count


@dataclass(frozen=True)
class BlockPlan:
    """Labels U1/U2/U3 of the time points 0..n-1 for one set of observed prices."""

    n: int
    H: int
    labels: np.ndarray
    sub_blocks: tuple[tuple[int, str], ...]
    counts: tuple[MomentumCount, ...]
    relabeled: tuple[int, ...] = ()

    @property
    def clamped_blocks(self) -> int:
        return sum(1 for c in self.counts if c.clamped)

    def points(self, label: int) -> list[int]:
        return [int(k) for k in np.flatnonzero(self.labels == label)]

    def coverage_ok(self) -> bool:
        """Every H + 1 consecutive points contain a U1 point."""
        w = self.H + 1
        is1 = (self.labels == U1).astype(int)
        if self.n < w:
            return bool(is1.any()) or self.n == 0
        window = np.convolve(is1, np.ones(w, dtype=int), mode="valid")
        return bool(window.min() >= 1)


def minimum_n(schedule: VolSchedule, H: int, limit: int = 10**7) -> int:
    """Smallest n for which every interval holds at least one sub-block."""
    n = (2 * H + 2) ** 2
    while n <= limit:
        if _plan_shape_ok(n, H, schedule):
            return n
        n += 1
    raise ConfigError("no admissible n below the search limit")


def _plan_shape_ok(n: int, H: int, schedule: VolSchedule) -> bool:
    r = math.isqrt(n)
    if r // (2 * H + 2) < 1:
        return False
    b = schedule.bounds(n)
    for j in range(schedule.J):
        blocks = min(int(math.floor(math.sqrt(n) * (schedule.partition[j + 1] - schedule.partition[j]))), (b[j + 1] - b[j]) // r)
        if blocks < 1:
            return False
    return True


def _label_sub_block(labels: np.ndarray, k: int, H: int, kind: str) -> None:
    size = 2 * H + 2
    if kind == "momentum":
        labels[k : k + size] = U2
        labels[k] = labels[k + H + 1] = U1
    elif kind == "reversion":
        labels[k : k + size] = U3
        labels[k : k + size : 2] = U1
    else:
        raise ConfigError(f"unknown sub-block kind {kind!r}")


def tile_sub_blocks(spec: ModelSpec, kinds: Sequence[str], start: int = 0) -> BlockPlan:
    """Plan with consecutive sub-blocks of the given kinds from ``start``; other points U1.

    Useful at small n, where the sqrt(n)-block layout of ``plan_blocks``
    has no room for a sub-block.
    """
    n, H = spec.n, spec.H
    size = 2 * H + 2
    if H == 0 or start < 0 or start + size * len(kinds) > n:
        raise ConfigError(f"{len(kinds)} sub-blocks of {size} points do not fit in n = {n} from {start}")
    labels = np.full(n, U1, dtype=np.int8)
    for i, kind in enumerate(kinds):
        _label_sub_block(labels, start + i * size, H, kind)
    relabeled = (0,) if labels[0] != U1 else ()
    labels[0] = U1
    plan = BlockPlan(n, H, labels, tuple((start + i * size, kd) for i, kd in enumerate(kinds)), (), relabeled)
    if not plan.coverage_ok():
        raise InfeasibleConstructionError("block plan leaves H + 1 consecutive points without U1")
    return plan


def plan_blocks(
    spec: ModelSpec, schedule: VolSchedule, observed: Sequence[float] | None = None
) -> BlockPlan:
    """Deterministic labelling for the given observed prices S_{[n t_1]}, S_{[n t_2]}, ...

    ``observed`` may be omitted for constant schedules. Intervals whose
    price-dependent rho needs more observations than given stay U1.
    """
    n, H = spec.n, spec.H
    if not _plan_shape_ok(n, H, schedule):
        raise ConfigError(
            f"n = {n} too small for this schedule at H = {H}: every interval needs a full "
            f"sub-block; minimum n is {minimum_n(schedule, H)}"
        )
    if observed is None:
        if not schedule.is_constant:
            raise ConfigError("price-dependent schedules need the observed prices")
        observed = ()
    labels = np.full(n, U1, dtype=np.int8)
    sub_blocks: list[tuple[int, str]] = []
    counts = []
    r = math.isqrt(n)
    size = 2 * H + 2
    per_block = r // size
    b = schedule.bounds(n)
    for j in range(schedule.J):
        if callable(schedule.rho[j]) and len(observed) < j:
            # not determined yet at the nodes this plan serves
            continue
        mc = momentum_count(spec, schedule, j, list(observed)[:j])
        counts.append(mc)
        blocks = min(int(math.floor(math.sqrt(n) * (schedule.partition[j + 1] - schedule.partition[j]))), (b[j + 1] - b[j]) // r)
        for blk in range(blocks):
            start = b[j] + blk * r
            for sb in range(per_block):
                k = start + sb * size
                if H == 0:
                    # the only feasible measure is the martingale one
                    sub_blocks.append((k, "martingale"))
                    continue
                kind = "momentum" if sb < mc.count else "reversion"
                sub_blocks.append((k, kind))
                _label_sub_block(labels, k, H, kind)
    # U2/U3 need S_{k-1} from the same interval
    relabeled = []
    for k in {0, *b[:-1]}:
        if k < n and labels[k] != U1:
            labels[k] = U1
            relabeled.append(k)
    plan = BlockPlan(n, H, labels, tuple(sub_blocks), tuple(counts), tuple(sorted(relabeled)))
    if not plan.coverage_ok():
        raise InfeasibleConstructionError("block plan leaves H + 1 consecutive points without U1")
    return plan


def _up_probability(spec: ModelSpec, label: int, last_up) -> np.ndarray:
    """Solve p (e^a - 1) + (1 - p)(e^{-a} - 1) = target / S_k for the label and last move."""
    a = spec.log_step
    last_up = np.asarray(last_up, dtype=bool)
    if label == U1:
        return np.full(last_up.shape, crr_measure(spec))
    c = 1.0 - 1.0 / math.sqrt(spec.n)
    # (S_k - S_{k-1}) / S_k
    rel = np.where(last_up, 1.0 - math.exp(-a), 1.0 - math.exp(a))
    target = c * rel if label == U2 else -c * rel
    return (target - (math.exp(-a) - 1.0)) / (math.exp(a) - math.exp(-a))


def _probabilities_ok(spec: ModelSpec) -> bool:
    for label in (U2, U3):
        p = _up_probability(spec, label, [False, True])
        if p.min() <= PROB_MARGIN or p.max() >= 1.0 - PROB_MARGIN:
            return False
    return True


def _check_probabilities(spec: ModelSpec, p: np.ndarray, k: int, where: str) -> None:
    bad = (p <= PROB_MARGIN) | (p >= 1.0 - PROB_MARGIN)
    if bad.any():
        hint = next(
            (m for m in range(spec.n, 100 * spec.n + 1) if _probabilities_ok(ModelSpec(spec.s, spec.sigma, m, spec.H))),
            None,
        )
        if hint:
            est = f"; probabilities become admissible from about n = {hint}"
        else:
            est = (
                f"; no n up to {100 * spec.n} admits them (a momentum step after a down move "
                "needs 1 - 1/sqrt(n) < exp(-sigma/sqrt(n)))"
            )
        raise InfeasibleConstructionError(
            f"up-probability {float(p[bad][0]):.3g} outside (0, 1) at step {k} ({where}){est}"
        )


@dataclass
class ConstructedMeasure:
    """Up-probabilities of the built measure.

    ``table[k, last]`` (last = 0 down, 1 up) when the labels do not depend
    on the path; otherwise ``nodes[k][prefix]`` over all F_k atoms.
    """

    spec: ModelSpec
    table: np.ndarray | None = None
    nodes: list[np.ndarray] | None = None
    plans: dict = field(default_factory=dict)

    @property
    def markov(self) -> bool:
        return self.table is not None

    @property
    def clamped_blocks(self) -> int:
        return max((p.clamped_blocks for p in self.plans.values()), default=0)

    def up_probabilities(self, k: int) -> np.ndarray:
        """p on every F_k atom (2**k entries)."""
        if self.nodes is not None:
            return self.nodes[k]
        if k == 0:
            return self.table[0, :1].copy()
        prefixes = np.arange(1 << k, dtype=np.int64)
        return self.table[k][(prefixes >> (k - 1)) & 1]

    def min_probability(self) -> float:
        if self.table is not None:
            return float(min(self.table.min(), (1 - self.table).min()))
        return float(min(min(p.min(), (1 - p).min()) for p in self.nodes))

    def path_probabilities(self) -> np.ndarray:
        n = self.spec.n
        if n > MAX_ENUMERATION_STEPS:
            raise CapacityError(f"path enumeration limited to n <= {MAX_ENUMERATION_STEPS}", MAX_ENUMERATION_STEPS)
        paths = np.arange(1 << n, dtype=np.int64)
        prob = np.ones(1 << n)
        for k in range(n):
            p = self.up_probabilities(k)[paths & ((1 << k) - 1)]
            up = ((paths >> k) & 1).astype(bool)
            prob *= np.where(up, p, 1.0 - p)
        return prob

    def level_distribution(self) -> np.ndarray:
        """Law of (#up moves, last move) after n steps, shape (n + 1, 2); Markov measures only."""
        if not self.markov:
            raise ConfigError("lattice distribution needs a path-independent plan")
        n = self.spec.n
        dist = np.zeros((n + 1, 2))
        p0 = self.table[0, 0]
        dist[0, 0], dist[1, 1] = 1.0 - p0, p0
        for k in range(1, n):
            new = np.zeros_like(dist)
            for last in (0, 1):
                p = self.table[k, last]
                new[1:, 1] += p * dist[:-1, last]
                new[:, 0] += (1.0 - p) * dist[:, last]
            dist = new
        return dist

    def terminal_log_variance(self) -> float:
        w = self.level_distribution().sum(axis=1)
        x = self.spec.log_step * (2 * np.arange(self.spec.n + 1) - self.spec.n)
        mean = w @ x
        return float(w @ (x - mean) ** 2)

    def residual_max(self) -> float:
        """max over k and F_{(k-H)^+} atoms of |E_Q[S_{k+1} - S_k | atom]| (conditional)."""
        spec = self.spec
        if not self.markov:
            from .superhedge import verify_feasibility

            return verify_feasibility(spec, self.path_probabilities(), conditional=True)
        a = spec.log_step
        eu, ed = math.exp(a) - 1.0, math.exp(-a) - 1.0
        worst = 0.0
        for k in range(spec.n):
            # g[j, last] = E[dS_k | F_k] with j up moves so far
            j = np.arange(k + 1)
            S = spec.s * np.exp(a * (2 * j - k))
            p = self.table[k]
            g = S[:, None] * (p[None, :] * eu + (1.0 - p[None, :]) * ed)
            m = spec.info_step(k)
            for i in range(k - 1, m - 1, -1):
                pi = self.table[i]
                # from (j, last) at step i to (j + 1, up) or (j, down) at step i + 1
                g = pi[None, :] * g[1:, 1][:, None] + (1.0 - pi[None, :]) * g[:-1, 0][:, None]
            if m == 0:
                g = g[:1, :1]
            worst = max(worst, float(np.abs(g).max()))
        return worst

    def to_json(self) -> dict:
        return {"residual_max": self.residual_max(), "clamped_blocks": self.clamped_blocks}


def _observation_steps(spec: ModelSpec, schedule: VolSchedule) -> list[int]:
    return schedule.bounds(spec.n)[1:-1]


def build_measure(spec: ModelSpec, schedule_or_plan: VolSchedule | BlockPlan) -> ConstructedMeasure:
    """Node up-probabilities hitting the U-label conditional-mean targets."""
    if isinstance(schedule_or_plan, BlockPlan):
        plans = {(): schedule_or_plan}
        markov = True
    else:
        schedule = schedule_or_plan
        markov = schedule.is_constant
        plans = {}
        if markov:
            plans[()] = plan_blocks(spec, schedule)
    n = spec.n
    if markov:
        plan = plans[()]
        table = np.empty((n, 2))
        for k in range(n):
            table[k] = _up_probability(spec, int(plan.labels[k]), [False, True])
            _check_probabilities(spec, table[k], k, f"label U{plan.labels[k]}")
        return ConstructedMeasure(spec, table=table, plans=plans)
    if n > MAX_ENUMERATION_STEPS:
        raise CapacityError(
            f"price-dependent schedules are enumerated node by node; n <= {MAX_ENUMERATION_STEPS}",
            MAX_ENUMERATION_STEPS,
        )
    obs_steps = _observation_steps(spec, schedule)
    nodes = []
    for k in range(n):
        prefixes = np.arange(1 << k, dtype=np.int64)
        p = np.empty(prefixes.size)
        # net level at each observation step available at time k
        seen = [t for t in obs_steps if t <= k]
        obs = []
        for t in seen:
            ups = np.zeros(prefixes.size, dtype=np.int64)
            for i in range(t):
                ups += (prefixes >> i) & 1
            obs.append(spec.s * np.exp(spec.log_step * (2 * ups - t)))
        obs_matrix = np.stack(obs, axis=1) if obs else np.zeros((prefixes.size, 0))
        last_up = ((prefixes >> (k - 1)) & 1).astype(bool) if k > 0 else np.zeros(1, dtype=bool)
        for i in range(prefixes.size):
            key = tuple(np.round(obs_matrix[i], 15))
            if key not in plans:
                plans[key] = plan_blocks(spec, schedule, list(key))
            label = int(plans[key].labels[k])
            p[i] = _up_probability(spec, label, last_up[i : i + 1])[0]
        _check_probabilities(spec, p, k, "node")
        nodes.append(p)
    return ConstructedMeasure(spec, nodes=nodes, plans=plans)


def evaluate_expectation(spec: ModelSpec, measure: ConstructedMeasure, payoff: PayoffSpec) -> float:
    """E_Q[F_n]: exact over all paths for n <= 20; on the lattice for larger n.

    The lattice route needs a path-independent plan and a terminal payoff.
    """
    if spec.n <= MAX_ENUMERATION_STEPS:
        F = payoff.evaluate_paths(all_stock_paths(spec))
        return float(measure.path_probabilities() @ F)
    if not (measure.markov and payoff.is_terminal):
        raise CapacityError(
            f"exact expectation beyond n = {MAX_ENUMERATION_STEPS} needs a constant schedule and a terminal payoff",
            MAX_ENUMERATION_STEPS,
        )
    w = measure.level_distribution().sum(axis=1)
    j = np.arange(spec.n + 1)
    return float(w @ payoff.terminal(spec.s * np.exp(spec.log_step * (2 * j - spec.n))))


@dataclass(frozen=True)
class ConstructionReport:
    expectation: float
    residual_max: float
    clamped_blocks: int
    min_probability: float

    def to_json(self) -> dict[str, Any]:
        return {
            "expectation": self.expectation,
            "residual_max": self.residual_max,
            "clamped_blocks": self.clamped_blocks,
            "min_probability": self.min_probability,
        }


def construct_lower_bound(spec: ModelSpec, schedule: VolSchedule, payoff: PayoffSpec) -> ConstructionReport:
    measure = build_measure(spec, schedule)
    return ConstructionReport(
        expectation=evaluate_expectation(spec, measure, payoff),
        residual_max=measure.residual_max(),
        clamped_blocks=measure.clamped_blocks,
        min_probability=measure.min_probability(),
    )
