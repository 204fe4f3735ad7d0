"""Bounded-variable primal simplex over dense numpy arrays.

Every row gets a logical column ([0, inf) slack for inequalities, [0, 0] for
equalities), so the identity is always a valid starting basis and any cached
basis can warm-start a re-solve after bound changes. Infeasible starts are
repaired by a composite phase 1 that minimises the total bound violation of
the basic variables; once feasible, the same loop prices the real objective.
Dantzig pricing switches permanently to Bland's rule after 1,000 degenerate
steps, which guarantees termination.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .encode import MilpProblem, Sense

__all__ = ["LpStatus", "LpSolution", "SolverError", "StandardForm", "solve_lp"]

_PIVOT_TOL = 1e-10
_PRICE_TOL = 1e-9
_FEAS_TOL = 1e-10
_DEGEN_LIMIT = 1000
_REFACTOR_EVERY = 200


class SolverError(RuntimeError):
    """Numerical failure inside the LP core."""


class LpStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


@dataclass
class LpSolution:
    status: LpStatus
    objective: float
    values: np.ndarray | None
    iterations: int
    basis: np.ndarray | None = None
    at_up: np.ndarray | None = None


class StandardForm:
    """Equality-form LP data for a MilpProblem, reusable across bound overrides.

    Columns: the problem's variables followed by one logical column per row
    (GE rows are negated into LE form first). Integrality is dropped here;
    callers restrict binaries through the bound vectors.
    """

    def __init__(self, problem: MilpProblem):
        n = problem.num_vars
        rows, rhs, is_eq = [], [], []
        for con in problem.constraints:
            coefs = np.zeros(n)
            for i, c in con.terms:
                coefs[i] += c
            if con.sense is Sense.GE:
                rows.append(-coefs)
                rhs.append(-con.rhs)
                is_eq.append(False)
            else:
                rows.append(coefs)
                rhs.append(con.rhs)
                is_eq.append(con.sense is Sense.EQ)
        m = len(rows)
        self.m = m
        self.n_struct = n
        self.total = n + m
        A = np.zeros((m, self.total))
        if m:
            A[:, :n] = np.vstack(rows)
            A[:, n:] = np.eye(m)
        self.A = np.ascontiguousarray(A)
        self.b = np.asarray(rhs, dtype=np.float64)
        self.is_eq = np.asarray(is_eq, dtype=bool)

        self.c = np.zeros(self.total)
        for i, coef in problem.objective.items():
            self.c[i] = coef
        self.base_lo = np.zeros(self.total)
        self.base_hi = np.zeros(self.total)
        for v in problem.vars:
            self.base_lo[v.id] = v.lo
            self.base_hi[v.id] = v.hi
        self.base_hi[n:][~self.is_eq] = np.inf
        self.objective_const = problem.objective_const

    def solve(
        self,
        lo: np.ndarray | None = None,
        hi: np.ndarray | None = None,
        start_basis: np.ndarray | None = None,
        start_at_up: np.ndarray | None = None,
    ) -> LpSolution:
        """Maximise over the (possibly overridden) structural bounds.

        `start_basis`/`start_at_up` warm-start from a previous solution's
        basis; bound changes since then are repaired by the composite phase.
        """
        m = self.m
        full_lo = self.base_lo.copy()
        full_hi = self.base_hi.copy()
        if lo is not None:
            full_lo[: self.n_struct] = lo
        if hi is not None:
            full_hi[: self.n_struct] = hi
        if np.any(full_lo[: self.n_struct] > full_hi[: self.n_struct]):
            return LpSolution(LpStatus.INFEASIBLE, -np.inf, None, 0)
        if m == 0:
            x = np.where(self.c[: self.n_struct] >= 0,
                         full_hi[: self.n_struct], full_lo[: self.n_struct])
            obj = float(self.c[: self.n_struct] @ x) + self.objective_const
            return LpSolution(LpStatus.OPTIMAL, obj, x, 0)

        kern = _Kernel(self, full_lo, full_hi, start_basis, start_at_up)
        status, iters = kern.optimize()
        if status is LpStatus.INFEASIBLE:
            return LpSolution(LpStatus.INFEASIBLE, -np.inf, None, iters)
        if status is LpStatus.UNBOUNDED:
            return LpSolution(LpStatus.UNBOUNDED, np.inf, None, iters)
        values = kern.x[: self.n_struct].copy()
        self._verify(values, full_lo, full_hi)
        obj = float(self.c[: self.n_struct] @ values) + self.objective_const
        return LpSolution(LpStatus.OPTIMAL, obj, values, iters,
                          basis=kern.basis.copy(), at_up=kern.at_up.copy())

    def _verify(self, values: np.ndarray, full_lo, full_hi) -> None:
        lo, hi = full_lo[: self.n_struct], full_hi[: self.n_struct]
        worst = float(np.maximum(lo - values, values - hi).max(initial=0.0))
        if worst > 1e-9:
            raise SolverError(f"bound violation {worst:.3e} in LP solution")
        np.clip(values, lo, hi, out=values)
        res = self.A[:, : self.n_struct] @ values - self.b
        worst_eq = float(np.abs(res[self.is_eq]).max(initial=0.0))
        worst_le = float(res[~self.is_eq].max(initial=0.0))
        if worst_eq > 1e-7 or worst_le > 1e-7:
            raise SolverError(f"row violation (eq {worst_eq:.3e}, ineq {worst_le:.3e})")


class _Kernel:
    """Simplex state: bounds, values, basis and its inverse."""

    def __init__(self, sf: StandardForm, lo, hi, start_basis, start_at_up):
        self.sf = sf
        self.lo = lo
        self.hi = hi
        self.m = sf.m
        total = sf.total
        if start_basis is None:
            self.basis = np.arange(sf.n_struct, total, dtype=np.intp)
            self.binv = np.eye(self.m)
        else:
            self.basis = np.array(start_basis, dtype=np.intp)
            B = sf.A[:, self.basis]
            try:
                self.binv = np.linalg.inv(B)
            except np.linalg.LinAlgError:
                self.basis = np.arange(sf.n_struct, total, dtype=np.intp)
                self.binv = np.eye(self.m)
        self.in_basis = np.zeros(total, dtype=bool)
        self.in_basis[self.basis] = True
        if start_at_up is None:
            self.at_up = np.zeros(total, dtype=bool)
        else:
            self.at_up = np.array(start_at_up, dtype=bool)
            self.at_up[self.in_basis] = False
        self.at_up &= np.isfinite(hi)
        self.x = np.where(self.at_up, np.where(np.isfinite(hi), hi, 0.0),
                          np.where(np.isfinite(lo), lo, 0.0))
        self._set_basics_from_nonbasics()
        self.degenerate_pivots = 0
        self.bland = False

    def _set_basics_from_nonbasics(self) -> None:
        xn = self.x.copy()
        xn[self.basis] = 0.0
        self.x[self.basis] = self.binv @ (self.sf.b - self.sf.A @ xn)

    def optimize(self) -> tuple[LpStatus, int]:
        sf = self.sf
        m = self.m
        A = sf.A
        lo, hi = self.lo, self.hi
        x = self.x
        max_iters = 20000 + 30 * sf.total
        movable = hi > lo

        for it in range(1, max_iters + 1):
            if it % _REFACTOR_EVERY == 0:
                B = A[:, self.basis]
                try:
                    self.binv = np.linalg.inv(B)
                except np.linalg.LinAlgError as exc:
                    raise SolverError(f"singular basis: {exc}") from exc
                self._set_basics_from_nonbasics()

            xb = x[self.basis]
            lob = lo[self.basis]
            hib = hi[self.basis]
            below = lob - xb > _FEAS_TOL
            above = xb - hib > _FEAS_TOL
            restoring = bool(below.any() or above.any())
            if restoring:
                c_eff = np.zeros(sf.total)
                c_eff[self.basis[below]] = 1.0
                c_eff[self.basis[above]] = -1.0
            else:
                c_eff = sf.c

            y = c_eff[self.basis] @ self.binv
            d = c_eff - y @ A
            eligible_mask = (~self.in_basis & movable
                             & ((~self.at_up & (d > _PRICE_TOL))
                                | (self.at_up & (d < -_PRICE_TOL))))
            eligible = np.flatnonzero(eligible_mask)
            if eligible.size == 0:
                if restoring:
                    return LpStatus.INFEASIBLE, it
                return LpStatus.OPTIMAL, it
            if self.bland:
                j = int(eligible[0])
            else:
                j = int(eligible[np.argmax(np.abs(d[eligible]))])
            direction = -1.0 if self.at_up[j] else 1.0

            w = self.binv @ A[:, j]
            coef = direction * w

            # Blocking bound ahead of each basic variable in its travel
            # direction; a variable beyond a bound blocks when it reaches it.
            t_rows = np.full(m, np.inf)
            down = coef > _PIVOT_TOL
            up = coef < -_PIVOT_TOL
            tgt_down = np.where(above, hib, lob)
            tgt_up = np.where(below, lob, hib)
            down &= ~below  # below-lo moving further down never blocks
            up &= ~above
            with np.errstate(invalid="ignore"):
                t_rows[down] = (xb[down] - tgt_down[down]) / coef[down]
                t_rows[up] = (xb[up] - tgt_up[up]) / coef[up]
            t_rows[~np.isfinite(t_rows)] = np.inf
            np.maximum(t_rows, 0.0, out=t_rows)

            t_bound = hi[j] - lo[j]
            t_min = float(t_rows.min(initial=np.inf))
            leave_pos = -1
            t_best = t_bound
            if t_min < t_best:
                cand = np.flatnonzero(t_rows <= t_min + 1e-15)
                leave_pos = int(cand[np.argmin(self.basis[cand])])
                t_best = t_min
            if not math.isfinite(t_best):
                if restoring:
                    raise SolverError("unbounded infeasibility-reduction direction")
                return LpStatus.UNBOUNDED, it

            if t_best <= 1e-9:
                self.degenerate_pivots += 1
                if self.degenerate_pivots > _DEGEN_LIMIT:
                    self.bland = True

            x[j] += direction * t_best
            x[self.basis] = xb - t_best * coef
            if leave_pos < 0:
                self.at_up[j] = not self.at_up[j]
                continue

            leaving = int(self.basis[leave_pos])
            was_below = below[leave_pos]
            was_above = above[leave_pos]
            if coef[leave_pos] > 0.0:  # travelled down
                leaves_at_up = was_above
            else:  # travelled up
                leaves_at_up = not was_below
            target = hi[leaving] if leaves_at_up else lo[leaving]
            x[leaving] = target
            self.at_up[leaving] = leaves_at_up
            self.in_basis[leaving] = False
            self.basis[leave_pos] = j
            self.in_basis[j] = True
            self.at_up[j] = False

            wr = w[leave_pos]
            if abs(wr) < _PIVOT_TOL:
                raise SolverError(f"vanishing pivot element {wr:.3e}")
            pivot_row = self.binv[leave_pos] / wr
            self.binv -= np.outer(w, pivot_row)
            self.binv[leave_pos] = pivot_row
        raise SolverError(f"iteration limit {max_iters} exceeded")


def solve_lp(problem: MilpProblem, lo: np.ndarray | None = None,
             hi: np.ndarray | None = None) -> LpSolution:
    """Solve the LP relaxation of a MilpProblem (integrality dropped)."""
    return StandardForm(problem).solve(lo, hi)
