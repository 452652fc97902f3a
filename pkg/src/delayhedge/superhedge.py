"""Exact super-replication in the binomial model with a delay of H steps.

The primal LP has the initial capital and one free position per
(step k, atom of F_{(k-H)^+}); there is one ">=" row per path. Its row
multipliers are a probability on paths satisfying the delayed martingale
constraints, i.e. the optimal dual pricing measure.

The LP maximizes over the closed polytope {q >= 0}, while the pricing set
uses measures equivalent to P. The CRR measure is strictly positive and
feasible, so the supremum over equivalent measures equals the maximum over
the closure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, NumericalError
from .lp import GE, LinearProgram, LpSolution, solve_lp
from .model import (
    ModelSpec,
    PayoffSpec,
    all_moves,
    all_stock_paths,
    crr_path_probabilities,
    payoff_vector,
)

#: Hard cap on n for the dense LP.
MAX_STEPS = 14


@dataclass(frozen=True)
class DelayedNodeIndex:
    """Position gamma_{k, node}: step k, node = (k-H)^+ -bit prefix."""

    k: int
    node: int


def position_offsets(spec: ModelSpec) -> np.ndarray:
    """Column offset of the first gamma of each step (after the capital column)."""
    counts = [spec.atom_count(k) for k in range(spec.n)]
    return 1 + np.concatenate(([0], np.cumsum(counts)[:-1])).astype(np.int64)


def position_index(spec: ModelSpec) -> list[DelayedNodeIndex]:
    return [DelayedNodeIndex(k, node) for k in range(spec.n) for node in range(spec.atom_count(k))]


def price_increments(spec: ModelSpec) -> np.ndarray:
    """Delta S_k = S_{k+1} - S_k on every path, shape (2**n, n)."""
    prices = all_stock_paths(spec)
    return np.diff(prices, axis=1)


def atom_ids(spec: ModelSpec, k: int) -> np.ndarray:
    """F_{(k-H)^+} atom of every path."""
    paths = np.arange(spec.n_paths, dtype=np.int64)
    return paths & ((1 << spec.info_step(k)) - 1)


def row_paths(n: int) -> np.ndarray:
    """Path encoded by each LP row: bit-reversed order, so neighbouring rows share long prefixes.

    Bland's rule breaks ties by index; with this order it moves between
    better-conditioned bases than with the natural path order.
    """
    paths = np.arange(1 << n, dtype=np.int64)
    rev = np.zeros_like(paths)
    for i in range(n):
        rev |= ((paths >> i) & 1) << (n - 1 - i)
    return rev


def _check_budget(spec: ModelSpec, max_steps: int) -> None:
    if spec.n > max_steps:
        raise CapacityError(
            f"super-replication LP limited to n <= {max_steps} (got n = {spec.n})", max_steps
        )


def assemble_primal(spec: ModelSpec, payoff: PayoffSpec, max_steps: int = MAX_STEPS) -> LinearProgram:
    """Primal super-hedging LP: minimize x s.t. x + sum_k gamma dS_k >= F_n on every path.

    Row r is the constraint of path ``row_paths(n)[r]``.
    """
    _check_budget(spec, max_steps)
    payoff.require_continuous()
    F = payoff_vector(spec, payoff)
    dS = price_increments(spec)
    offsets = position_offsets(spec)
    n_var = 1 + spec.position_count()
    A = np.zeros((spec.n_paths, n_var))
    A[:, 0] = 1.0
    rows = np.arange(spec.n_paths)
    for k in range(spec.n):
        A[rows, offsets[k] + atom_ids(spec, k)] = dS[:, k]
    c = np.zeros(n_var)
    c[0] = 1.0
    order = row_paths(spec.n)
    return LinearProgram(
        c=c, A=A[order], senses=[GE] * spec.n_paths, b=F[order], free=np.ones(n_var, dtype=bool)
    )


@dataclass
class HedgePlan:
    x: float
    gamma: dict[DelayedNodeIndex, float]

    def terminal_values(self, spec: ModelSpec) -> np.ndarray:
        """Y_1 on every path."""
        dS = price_increments(spec)
        out = np.full(spec.n_paths, self.x)
        for k in range(spec.n):
            g = np.array([self.gamma[DelayedNodeIndex(k, a)] for a in range(spec.atom_count(k))])
            out += g[atom_ids(spec, k)] * dS[:, k]
        return out


@dataclass
class DualMeasure:
    q: np.ndarray
    residuals: dict[tuple[int, int], float] = field(default_factory=dict)
    clip_deviation: float = 0.0

    @property
    def max_residual(self) -> float:
        return max((abs(v) for v in self.residuals.values()), default=0.0)


@dataclass
class SuperhedgeResult:
    value: float
    plan: HedgePlan
    dual: DualMeasure
    gap: float
    primal_residual: float
    dual_residual: float
    dual_value: float
    payoff_extrapolated: bool = False
    lp: LpSolution | None = None

    def to_json(self, sparse_tol: float = 1e-14) -> dict:
        gamma = [
            [idx.k, idx.node, v] for idx, v in self.plan.gamma.items() if abs(v) > sparse_tol
        ]
        q = [[int(i), float(v)] for i, v in enumerate(self.dual.q) if v > sparse_tol]
        return {
            "V_n": self.value,
            "gap": self.gap,
            "residual_max": self.dual.max_residual,
            "primal_residual": self.primal_residual,
            "x": self.plan.x,
            "gamma": gamma,
            "q": q,
            "payoff_extrapolated": self.payoff_extrapolated,
        }


def conditional_residuals(spec: ModelSpec, q: np.ndarray, conditional: bool = False) -> dict:
    """E_q[dS_k ; atom] for every (k, atom of F_{(k-H)^+}).

    With ``conditional`` the values are divided by the atom mass (atoms of
    zero mass are skipped).
    """
    dS = price_increments(spec)
    out = {}
    for k in range(spec.n):
        ids = atom_ids(spec, k)
        na = spec.atom_count(k)
        mean = np.bincount(ids, weights=q * dS[:, k], minlength=na)
        if conditional:
            mass = np.bincount(ids, weights=q, minlength=na)
            pos = mass > 0
            mean = np.where(pos, mean / np.where(pos, mass, 1.0), np.nan)
        for a in range(na):
            if not np.isnan(mean[a]):
                out[(k, a)] = float(mean[a])
    return out


def verify_feasibility(spec: ModelSpec, q, conditional: bool = False) -> float:
    """Largest |E_q[S_{k+1} - S_k ; A]| over atoms A of F_{(k-H)^+}, k < n.

    Recomputed from scratch on the path enumeration. The default uses
    mass-weighted residuals (the LP constraint rows); ``conditional=True``
    divides by the atom mass.
    """
    q = np.asarray(getattr(q, "q", q), dtype=float)
    if q.shape != (spec.n_paths,):
        raise ValueError(f"measure must have {spec.n_paths} entries")
    if q.min() < -1e-12:
        raise ValueError(f"negative probability {q.min():.3g}")
    if abs(q.sum() - 1.0) > 1e-9:
        raise ValueError(f"measure sums to {q.sum():.12g}, not 1")
    res = conditional_residuals(spec, q, conditional)
    return max((abs(v) for v in res.values()), default=0.0)


def super_replication_price(
    spec: ModelSpec,
    payoff: PayoffSpec,
    feas_tol: float = 1e-9,
    gap_tol: float = 1e-7,
    max_steps: int = MAX_STEPS,
) -> SuperhedgeResult:
    """V_n with the optimal hedge and the optimal dual measure."""
    lp = assemble_primal(spec, payoff, max_steps)
    sol = solve_lp(lp, feas_tol=feas_tol, gap_tol=gap_tol)
    if sol.status == "infeasible":
        raise NumericalError("super-hedging LP reported infeasible; internal consistency failure")
    if sol.status != "optimal":
        raise NumericalError(f"super-hedging LP ended with status {sol.status}")
    idx = position_index(spec)
    plan = HedgePlan(x=float(sol.x[0]), gamma={i: float(v) for i, v in zip(idx, sol.x[1:])})
    y = np.empty(spec.n_paths)
    y[row_paths(spec.n)] = sol.duals
    clipped = np.maximum(y, 0.0)
    deviation = float(max(-y.min(initial=0.0), abs(y.sum() - 1.0)))
    q = clipped / clipped.sum()
    dual = DualMeasure(q=q, residuals=conditional_residuals(spec, q), clip_deviation=deviation)
    F = payoff_vector(spec, payoff)
    dual_value = float(q @ F)
    return SuperhedgeResult(
        value=plan.x,
        plan=plan,
        dual=dual,
        gap=abs(plan.x - dual_value),
        primal_residual=sol.primal_residual,
        dual_residual=sol.dual_residual,
        dual_value=dual_value,
        payoff_extrapolated=payoff.extrapolated(all_stock_paths(spec)),
        lp=sol,
    )


@dataclass
class ProjectionDiagnostic:
    values: dict[tuple[int, int], float]
    undefined: list[tuple[int, int]]
    max_relative_deviation: float
    bound: float
    n: int

    @property
    def constant(self) -> float:
        """Empirical C in |M - S| <= C S / sqrt(n)."""
        return self.max_relative_deviation * math.sqrt(self.n)


def delayed_projection(spec: ModelSpec, q, mass_tol: float = 0.0) -> ProjectionDiagnostic:
    """M_k = E_q[S_k | F_{(k-H)^+}] on every atom, k = 0..n.

    Also reports max |M_k - S_k| / S_k over charged atoms and the a priori
    bound exp(2 sigma H / sqrt(n)) - 1 that holds for any measure, since
    S_k / S_{k-H} lies in [exp(-H a), exp(H a)] with a = sigma / sqrt(n).
    """
    q = np.asarray(getattr(q, "q", q), dtype=float)
    prices = all_stock_paths(spec)
    values: dict[tuple[int, int], float] = {}
    undefined: list[tuple[int, int]] = []
    worst = 0.0
    for k in range(spec.n + 1):
        ids = np.arange(spec.n_paths) & ((1 << spec.info_step(k)) - 1)
        na = 1 << spec.info_step(k)
        mass = np.bincount(ids, weights=q, minlength=na)
        mom = np.bincount(ids, weights=q * prices[:, k], minlength=na)
        charged = mass > mass_tol
        M = np.where(charged, mom / np.where(charged, mass, 1.0), np.nan)
        for a in range(na):
            if charged[a]:
                values[(k, a)] = float(M[a])
            else:
                undefined.append((k, a))
        rel = np.abs(M[ids] - prices[:, k]) / prices[:, k]
        rel = rel[charged[ids] & (q > 0)]
        if rel.size:
            worst = max(worst, float(rel.max()))
    bound = math.exp(2.0 * spec.H * spec.log_step) - 1.0
    return ProjectionDiagnostic(values, undefined, worst, bound, spec.n)


def projection_martingale_defect(spec: ModelSpec, diag: ProjectionDiagnostic, q) -> float:
    """max |E_q[M_{k+1} | F_{(k-H)^+}] - M_k| over atoms (tower identity check)."""
    q = np.asarray(getattr(q, "q", q), dtype=float)
    paths = np.arange(spec.n_paths)
    worst = 0.0
    for k in range(spec.n):
        m_k, m_next = spec.info_step(k), spec.info_step(k + 1)
        ids_k = paths & ((1 << m_k) - 1)
        ids_next = paths & ((1 << m_next) - 1)
        nxt = np.array([diag.values.get((k + 1, int(a)), np.nan) for a in ids_next])
        mass = np.bincount(ids_k, weights=q, minlength=1 << m_k)
        mom = np.bincount(ids_k, weights=q * np.nan_to_num(nxt), minlength=1 << m_k)
        for a in range(1 << m_k):
            if mass[a] > 0 and (k, a) in diag.values:
                worst = max(worst, abs(mom[a] / mass[a] - diag.values[(k, a)]))
    return worst
