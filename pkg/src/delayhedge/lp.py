"""Dense two-phase simplex with Bland's rule and dual extraction.

Free variables are never split. They start nonbasic and enter through the
ordinary basis logic, moving in whichever direction lowers the objective.
Once basic they can never leave, so their row and column are retired from
the working tableau; their values are recovered at the end from the
original rows.

Phase I uses one auxiliary column shared by all violated inequality rows,
pivoted in on the most violated row, plus one artificial per equality row.
Equality artificials stay in the tableau as trackers: their final reduced
costs give the multipliers of those rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.linalg.blas import dger

from .errors import ConfigError, IterationLimitError, NumericalError

log = logging.getLogger(__name__)

GE, LE, EQ = ">=", "<=", "="
_SENSES = (GE, LE, EQ)


@dataclass
class LinearProgram:
    """minimize c @ x subject to A x (senses) b, x_j >= 0 unless free[j]."""

    c: np.ndarray
    A: np.ndarray
    senses: list[str]
    b: np.ndarray
    free: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.c = np.asarray(self.c, dtype=float)
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float)
        m, n = self.A.shape
        if isinstance(self.senses, str):
            self.senses = [self.senses] * m
        self.senses = list(self.senses)
        if self.free is None:
            self.free = np.zeros(n, dtype=bool)
        self.free = np.asarray(self.free, dtype=bool)
        if self.c.shape != (n,) or self.b.shape != (m,) or len(self.senses) != m:
            raise ConfigError(
                f"inconsistent LP dimensions: A {self.A.shape}, c {self.c.shape}, "
                f"b {self.b.shape}, senses {len(self.senses)}"
            )
        if self.free.shape != (n,):
            raise ConfigError("free mask must have one entry per variable")
        if any(s not in _SENSES for s in self.senses):
            raise ConfigError(f"row senses must be in {_SENSES}")
        for name, arr in (("c", self.c), ("A", self.A), ("b", self.b)):
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"LP data {name} contains NaN or Inf")

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape

    def dual(self) -> LinearProgram:
        """The dual LP, written again as a minimization.

        Row i of the primal gets multiplier y_i (>= 0 for >= rows, <= 0 for
        <= rows, free for = rows); the dual maximizes b @ y subject to
        A^T y = c on free columns and A^T y <= c on nonnegative ones. It is
        returned as minimize -b @ y, so its optimum is minus the primal one.
        """
        m, n = self.A.shape
        # substitute y_i = -w_i on <= rows so every multiplier is >= 0 or free
        sign = np.array([-1.0 if s == LE else 1.0 for s in self.senses])
        At = (self.A * sign[:, None]).T
        senses = [EQ if f else LE for f in self.free]
        return LinearProgram(
            c=-self.b * sign,
            A=At,
            senses=senses,
            b=self.c.copy(),
            free=np.array([s == EQ for s in self.senses]),
        )


@dataclass
class LpSolution:
    status: str
    x: np.ndarray | None = None
    duals: np.ndarray | None = None
    objective: float = float("nan")
    dual_objective: float = float("nan")
    primal_residual: float = float("nan")
    dual_residual: float = float("nan")
    iterations: int = 0
    phase1_objective: float = 0.0
    ray: int | None = None
    info: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return abs(self.objective - self.dual_objective)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


# -- tableau machinery ----------------------------------------------------------


class _Tableau:
    """Working rows plus objective rows, stored column-major for BLAS rank-1 updates.

    The first ``rows`` rows hold the constraint coefficients with the
    right-hand side in the last column. Below them sit one row per objective
    (reduced costs, and minus the objective value in the last column); the
    bottom one is active. Carrying every objective through every pivot lets
    retired rows go without losing their contribution to later objectives.
    ``row_ids`` and ``col_ids`` map positions back to original rows and
    columns; retired rows and columns are dropped lazily.
    """

    rel_pivot_tol = 1e-7
    zero_tol = 1e-11
    drift_tol = 1e-9
    compact_fraction = 0.1
    shift_tol = 1e-7
    harris_tol = 1e-10

    def __init__(self, coeffs: np.ndarray, rhs: np.ndarray, basis: np.ndarray, free: np.ndarray,
                 costs: list[np.ndarray], pivot_tol: float):
        rows, cols = coeffs.shape
        self.costs = [np.asarray(cv, dtype=float) for cv in costs]
        self.T = np.zeros((rows + len(costs), cols + 1), order="F")
        self.T[:rows, :-1] = coeffs
        self.T[:rows, -1] = rhs
        # original rows, kept to rebuild B^{-1} [A | b] when round-off drifts
        self.T0 = np.hstack([coeffs, rhs[:, None]])
        self.basis = np.asarray(basis, dtype=np.int64).copy()
        self.free = np.asarray(free, dtype=bool)
        self.row_ids = np.arange(rows)
        self.col_ids = np.arange(cols)
        self.row_alive = np.ones(rows, dtype=bool)
        self.col_alive = np.ones(cols, dtype=bool)
        self.retired: dict[int, int] = {}  # original row -> free basic column
        self.redundant: list[int] = []
        self.pivot_tol = pivot_tol
        self.iterations = 0
        self.reinversions = 0
        self.shifts = 0
        self._price(self.T[:rows], self.basis)

    @property
    def rows(self) -> int:
        return self.T.shape[0] - len(self.costs)

    @property
    def objective(self) -> float:
        """Value of the active objective."""
        return -float(self.T[-1, -1])

    @property
    def reduced_costs(self) -> np.ndarray:
        return self.T[-1, :-1]

    def _price(self, body: np.ndarray, basis: np.ndarray) -> None:
        """Fill the objective rows from ``body`` = B^{-1} [A | b] (all rows, current columns)."""
        keep = np.append(self.col_ids, -1)
        for k, cv in enumerate(self.costs):
            cur = np.append(cv, 0.0)[keep]
            row = cur - cv[basis] @ body
            row[:-1][~self.col_alive] = 0.0
            self.T[self.rows + k] = row

    def pop_objective(self) -> None:
        """Discard the active objective; the one above it becomes active."""
        self.costs.pop()
        self.T = np.asfortranarray(self.T[:-1])

    def pivot(self, r: int, j: int) -> None:
        T = self.T
        piv = T[r, j]
        T[r, :] /= piv
        col = T[:, j].copy()
        col[r] = 0.0
        prow = T[r, :].copy()
        nz = np.flatnonzero(prow)
        if nz.size < 0.1 * prow.size:
            # sparse pivot row: update only the columns it touches
            T[:, nz] -= np.outer(col, prow[nz])
        else:
            out = dger(-1.0, col, prow, a=T, overwrite_a=True)
            if out is not T:  # BLAS refused in-place (layout); keep the result
                self.T = T = out
        T[:, j] = 0.0
        T[r, j] = 1.0
        self.basis[r] = self.col_ids[j]
        self.iterations += 1

    def retire(self, r: int, j: int) -> None:
        """Set aside the row and column of a free variable that just became basic."""
        self.retired[int(self.row_ids[r])] = int(self.col_ids[j])
        self.row_alive[r] = False
        self.col_alive[j] = False
        self.T[r, :] = 0.0
        self.T[:, j] = 0.0
        dead = (~self.row_alive).sum() + (~self.col_alive).sum()
        if dead > self.compact_fraction * (self.T.shape[0] + self.T.shape[1]):
            self.compact()

    def drop_row(self, r: int) -> None:
        """Remove a redundant row for good."""
        self.redundant.append(int(self.row_ids[r]))
        self.row_alive[r] = False
        self.T[r, :] = 0.0
        self.compact()

    def compact(self) -> None:
        rk = np.append(self.row_alive, np.ones(len(self.costs), dtype=bool))
        ck = np.append(self.col_alive, True)
        self.T = np.asfortranarray(self.T[np.ix_(rk, ck)])
        self.basis = self.basis[self.row_alive]
        self.row_ids = self.row_ids[self.row_alive]
        self.col_ids = self.col_ids[self.col_alive]
        self.row_alive = np.ones(self.row_ids.size, dtype=bool)
        self.col_alive = np.ones(self.col_ids.size, dtype=bool)

    def full_basis(self) -> tuple[np.ndarray, np.ndarray]:
        """All non-redundant original rows and the basic column of each."""
        self.compact()
        rows = list(self.row_ids) + list(self.retired)
        cols = list(self.basis) + list(self.retired.values())
        order = np.argsort(rows)
        return np.asarray(rows, dtype=np.int64)[order], np.asarray(cols, dtype=np.int64)[order]

    def reinvert(self) -> None:
        """Recompute working and objective rows as B^{-1} [A | b] for the current basis."""
        rows, cols = self.full_basis()
        T0 = self.T0[rows]
        body = sla.lu_solve(sla.lu_factor(T0[:, cols]), T0)
        keep = np.append(self.col_ids, T0.shape[1] - 1)
        body = body[:, keep]
        pos = np.searchsorted(rows, self.row_ids)
        self.T = np.zeros_like(self.T, order="F")
        self.T[: self.rows] = body[pos]
        self.T[np.arange(self.rows), np.searchsorted(self.col_ids, self.basis)] = 1.0
        self._price(body, cols)
        self.reinversions += 1

    def basic_values(self) -> np.ndarray:
        """Values of all original columns at the current basis (free basics excluded)."""
        w = np.zeros(self.T0.shape[1] - 1)
        alive = self.row_alive
        w[self.basis[alive]] = self.T[: self.rows, -1][alive]
        return w

    def run(self, eligible: np.ndarray, cost_tol: float, max_iter: int) -> tuple[str, int | None]:
        """Bland's-rule simplex on the active objective until optimal or unbounded.

        ``eligible`` is indexed by original column. A nonbasic free column
        enters when its reduced cost is nonzero, moving in the improving
        direction. A basic value below ``-drift_tol`` triggers a reinversion;
        values still negative but above ``-shift_tol`` afterwards are
        round-off of an ill-conditioned basis and are set to 0 (the final
        residuals are measured on the original rows, so a shift shows there).

        Ties in the ratio test go to the largest pivot element while the
        objective keeps improving; after ``rows + 50`` pivots without
        improvement the smallest basic index wins (Bland) until it improves.
        """
        last_obj, stalled = self.objective, 0
        while True:
            if self.T[: self.rows, -1].min(initial=0.0) < -self.drift_tol:
                self.reinvert()
                worst = self.T[: self.rows, -1].min(initial=0.0)
                if worst < -self.shift_tol:
                    raise NumericalError(
                        f"basis lost primal feasibility (basic value {worst:.3g}) after reinversion"
                    )
                if worst < -self.drift_tol:
                    rhs = self.T[: self.rows, -1]
                    rhs[rhs < 0] = 0.0
                    self.shifts += 1
            m = self.rows
            T = self.T
            d = T[-1, :-1]
            el = eligible[self.col_ids] & self.col_alive
            fr = self.free[self.col_ids]
            cand = np.flatnonzero(el & ((d < -cost_tol) | (fr & (d > cost_tol))))
            if cand.size == 0:
                return "optimal", None
            j = int(cand[0])
            sgn = 1.0 if d[j] < 0 else -1.0
            col = np.where(self.row_alive, sgn * T[:m, j], 0.0)
            # entries below the relative tolerance are treated as zero
            thresh = max(self.pivot_tol, self.rel_pivot_tol * float(np.abs(col).max(initial=0.0)))
            pos = np.flatnonzero(col > thresh)
            if pos.size == 0:
                return "unbounded", int(self.col_ids[j])
            # round-off on degenerate rows would otherwise break exact ties
            rhs = T[pos, -1]
            rhs = np.where(rhs > self.zero_tol, rhs, 0.0)
            ratios = rhs / col[pos]
            # Harris pass: rows within harris_tol of blocking compete on pivot size
            bound = ((rhs + self.harris_tol) / col[pos]).min()
            ties = pos[ratios <= bound]
            obj = self.objective
            if obj < last_obj - 1e-12 * max(1.0, abs(last_obj)):
                last_obj, stalled = obj, 0
            else:
                stalled += 1
            if stalled > self.rows + 50:
                r = int(ties[np.argmin(self.basis[ties])])
            else:
                r = int(ties[np.argmax(col[ties])])
            if self.iterations >= max_iter:
                raise IterationLimitError(f"simplex iteration cap {max_iter} exceeded")
            self.pivot(r, j)
            if fr[j]:
                self.retire(r, j)

    def solve(self, eligible, cost_tol, max_iter, infeasible_above: float | None = None):
        """Run the simplex; reinvert and resume once if the result looks suspect.

        A run is suspect when it claims unboundedness or, in phase I, ends
        above ``infeasible_above``. Returns (status, ray, objective).
        """
        for attempt in range(2):
            status, ray = self.run(eligible, cost_tol, max_iter)
            suspect = status == "unbounded" or (
                infeasible_above is not None and self.objective > infeasible_above
            )
            if not suspect or attempt == 1:
                break
            self.reinvert()
        if status == "optimal" and self.iterations:
            # fresh B^{-1} at the final basis; resume if round-off hid a pivot
            self.reinvert()
            status, ray = self.run(eligible, cost_tol, max_iter)
        return status, ray, self.objective


def _independent_rows(M: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Rows of ``M`` (full column rank) forming a well-conditioned square block."""
    if M.shape[1] == 0:
        return np.arange(0)
    p, _, u = sla.lu(M, p_indices=True)
    return np.argsort(p)[: M.shape[1]]


def solve_lp(
    lp: LinearProgram,
    feas_tol: float = 1e-9,
    gap_tol: float = 1e-7,
    max_iter: int | None = None,
    pivot_tol: float = 1e-9,
) -> LpSolution:
    """Solve ``lp`` by two-phase simplex with Bland's anti-cycling rule.

    Returns an :class:`LpSolution` with status ``optimal``, ``infeasible``
    (``phase1_objective`` is the certificate) or ``unbounded`` (``ray`` is the
    entering column). Raises :class:`IterationLimitError` past ``max_iter``
    pivots, default ``50 * (rows + cols)``.
    """
    A, b, c = lp.A, lp.b, lp.c
    m, n = A.shape
    if max_iter is None:
        max_iter = 50 * (m + n)
    cost_tol = 1e-9 * max(1.0, float(np.abs(c).max(initial=0.0)))

    # presolve: drop empty rows
    empty = ~np.any(A != 0.0, axis=1)
    for i in np.flatnonzero(empty):
        s, bi = lp.senses[i], b[i]
        ok = (s == GE and bi <= feas_tol) or (s == LE and bi >= -feas_tol) or (s == EQ and abs(bi) <= feas_tol)
        if not ok:
            return LpSolution("infeasible", phase1_objective=abs(bi), info={"empty_row": int(i)})
    rows = np.flatnonzero(~empty)
    Ar, br = A[rows], b[rows]
    senses = [lp.senses[i] for i in rows]
    mr = len(rows)

    # columns: structurals | slacks (one per inequality row) | equality artificials | auxiliary
    slack_sign = np.array([-1.0 if s == GE else (1.0 if s == LE else 0.0) for s in senses])
    ineq = np.flatnonzero(slack_sign != 0.0)
    eq_rows = np.flatnonzero(slack_sign == 0.0)
    n_sl, n_eq = ineq.size, eq_rows.size
    # scale inequality rows so their slack has coefficient +1, equality rows so rhs >= 0
    row_scale = np.where(slack_sign != 0.0, slack_sign, np.where(br < 0, -1.0, 1.0))
    rhs = br * row_scale
    viol = (slack_sign != 0.0) & (rhs < 0)
    has_aux = bool(viol.any())
    total = n + n_sl + n_eq + int(has_aux)
    coeffs = np.zeros((mr, total))
    coeffs[:, :n] = Ar * row_scale[:, None]
    slack_col = n + np.arange(n_sl)
    art_col = n + n_sl + np.arange(n_eq)
    coeffs[ineq, slack_col] = 1.0
    coeffs[eq_rows, art_col] = 1.0
    basis = np.empty(mr, dtype=np.int64)
    basis[ineq] = slack_col
    basis[eq_rows] = art_col
    aux = total - 1 if has_aux else -1
    if has_aux:
        coeffs[viol, aux] = -1.0
    free = np.zeros(total, dtype=bool)
    free[:n] = lp.free

    # phase II costs on top, phase I costs (when needed) active below them;
    # equality artificials stay after phase I as ineligible trackers
    c_full = np.zeros(total)
    c_full[:n] = c
    ph1_cols = np.append(art_col, [aux] if has_aux else []).astype(np.int64)
    costs = [c_full]
    if ph1_cols.size:
        c1 = np.zeros(total)
        c1[ph1_cols] = 1.0
        costs.append(c1)
    tab = _Tableau(coeffs, rhs, basis, free, costs, pivot_tol)
    scale = max(1.0, float(np.abs(rhs).max(initial=0.0)))
    eligible = np.zeros(total, dtype=bool)
    eligible[: n + n_sl] = True

    # phase I
    phase1 = 0.0
    if ph1_cols.size:
        if has_aux:
            tab.pivot(int(np.argmin(rhs)), aux)
        status, _, phase1 = tab.solve(eligible, 1e-12, max_iter, feas_tol * scale)
        if phase1 > feas_tol * scale:
            return LpSolution("infeasible", phase1_objective=phase1, iterations=tab.iterations)
        # drive remaining artificials out of the basis
        tab.compact()
        ph1_set = set(int(x) for x in ph1_cols)
        r = 0
        while r < tab.rows:
            if int(tab.basis[r]) in ph1_set:
                rowv = np.where(tab.col_ids < n + n_sl, tab.T[r, :-1], 0.0)
                j = int(np.argmax(np.abs(rowv)))
                if abs(rowv[j]) > 1e-9:
                    tab.pivot(r, j)
                    if tab.free[tab.col_ids[j]]:
                        tab.retire(r, j)
                        tab.compact()
                        continue
                else:
                    tab.drop_row(r)
                    continue
            r += 1
        tab.pop_objective()

    # phase II
    status, ray, _ = tab.solve(eligible, cost_tol, max_iter)
    if status == "unbounded":
        return LpSolution("unbounded", ray=ray, iterations=tab.iterations, phase1_objective=phase1)

    # primal values: basic nonfree values from the tableau, free basics from the original rows
    tab.compact()
    w = tab.basic_values()
    x = w[:n].copy()
    fb = np.array(sorted(tab.retired.values()), dtype=np.int64)
    live_rows = np.setdiff1d(np.arange(mr), tab.redundant)
    if fb.size:
        x[fb] = 0.0
        M = coeffs[np.ix_(live_rows, fb)]
        resid = rhs[live_rows] - coeffs[live_rows] @ np.append(x, w[n:])
        sel = _independent_rows(M)
        x[fb] = sla.solve(M[sel], resid[sel])
    # dual multipliers from the final reduced costs, read back to original rows
    d = np.zeros(total)
    d[tab.col_ids] = tab.reduced_costs
    y_r = np.zeros(mr)
    y_r[ineq] = -slack_sign[ineq] * d[slack_col]
    y_r[eq_rows] = -row_scale[eq_rows] * d[art_col]
    y_r[tab.redundant] = 0.0
    y = np.zeros(m)
    y[rows] = y_r

    sol = LpSolution("optimal", x=x, duals=y, iterations=tab.iterations, phase1_objective=phase1)
    sol.objective = float(c @ x)
    sol.dual_objective = float(b @ y)
    sol.primal_residual = primal_residual(lp, x)
    sol.dual_residual = dual_residual(lp, y)
    sol.info["objective_tableau"] = tab.objective
    sol.info["reinversions"] = tab.reinversions
    sol.info["shifts"] = tab.shifts
    if sol.primal_residual > feas_tol or sol.gap > gap_tol:
        log.warning(
            "LP solution outside tolerance: primal residual %.3g, gap %.3g",
            sol.primal_residual, sol.gap,
        )
    return sol


def primal_residual(lp: LinearProgram, x: np.ndarray) -> float:
    Ax = lp.A @ x
    viol = np.zeros(len(lp.b))
    for k, s in enumerate(lp.senses):
        if s == GE:
            viol[k] = max(lp.b[k] - Ax[k], 0.0)
        elif s == LE:
            viol[k] = max(Ax[k] - lp.b[k], 0.0)
        else:
            viol[k] = abs(Ax[k] - lp.b[k])
    bound = np.maximum(-x[~lp.free], 0.0)
    return float(max(viol.max(initial=0.0), bound.max(initial=0.0)))


def dual_residual(lp: LinearProgram, y: np.ndarray) -> float:
    """Largest violation of dual feasibility for minimization duals."""
    r = lp.c - lp.A.T @ y
    out = np.where(lp.free, np.abs(r), np.maximum(-r, 0.0))
    sign_viol = [max(-yi, 0.0) if s == GE else (max(yi, 0.0) if s == LE else 0.0) for s, yi in zip(lp.senses, y)]
    return float(max(out.max(initial=0.0), max(sign_viol, default=0.0)))
