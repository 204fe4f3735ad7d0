"""Anytime branch-and-bound over the LP core.

Maintains a certified bracket delta_lower <= delta* <= delta_upper at every
step: delta_upper is the best bound over open nodes (plus fathomed remainders)
and delta_lower the best integral-feasible value found. For certification
problems the incumbent value is re-derived from exact forward passes, so the
reported lower bound is always a truly achievable output gap.
"""
from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .encode import MilpProblem, check_assignment
from .simplex import LpSolution, LpStatus, SolverError, StandardForm

__all__ = [
    "SolveConfig",
    "SolveStatus",
    "CertificationResult",
    "branch_and_bound",
    "extract_witness",
]

_INT_TOL = 1e-6


@dataclass(frozen=True)
class SolveConfig:
    gap_tol: float = 1e-5
    time_cutoff_secs: float = 180.0
    node_limit: int = 10_000_000
    rng_seed: int = 0

    def __post_init__(self):
        if not self.gap_tol > 0:
            raise ValueError("gap_tol must be > 0")
        if not self.time_cutoff_secs > 0:
            raise ValueError("time_cutoff_secs must be > 0")


class SolveStatus(Enum):
    CONVERGED = "converged"
    CUTOFF_REACHED = "cutoff_reached"
    NODE_LIMIT = "node_limit"


@dataclass
class CertificationResult:
    delta_lower: float
    delta_upper: float
    witness: Optional[tuple[np.ndarray, np.ndarray, float]]
    status: SolveStatus
    nodes_explored: int
    wall_time: float
    incumbent_values: Optional[np.ndarray] = None

    @property
    def converged(self) -> bool:
        return self.status is SolveStatus.CONVERGED


class _Tree:
    """Best-first node pool keyed by LP bound, FIFO on ties."""

    def __init__(self):
        self._heap: list[tuple[float, int, dict, object, object]] = []
        self._seq = 0

    def push(self, bound: float, fixes: dict, basis=None, at_up=None) -> None:
        heapq.heappush(self._heap, (-bound, self._seq, fixes, basis, at_up))
        self._seq += 1

    def pop(self) -> tuple[float, dict, object, object]:
        nb, _, fixes, basis, at_up = heapq.heappop(self._heap)
        return -nb, fixes, basis, at_up

    def best_bound(self) -> float:
        return -self._heap[0][0] if self._heap else -math.inf

    def __len__(self) -> int:
        return len(self._heap)


def branch_and_bound(
    problem: MilpProblem,
    cfg: SolveConfig = SolveConfig(),
    on_progress: Optional[Callable[[float, float, int], None]] = None,
    refine_incumbent: Optional[Callable[[np.ndarray], float]] = None,
    completion: Optional[Callable[[np.ndarray], Optional[np.ndarray]]] = None,
) -> CertificationResult:
    """Solve the MILP to gap `cfg.gap_tol`, or return valid anytime bounds.

    Branching fixes the most-fractional binary (ties to the lowest id); node
    selection is best-first by LP bound. At every node the LP solution's
    binaries are also rounded (blockwise inside SOS groups) and re-solved as
    an incumbent heuristic; `completion` may additionally turn a fractional
    LP solution into a full feasible assignment without an extra LP solve
    (certification derives one from an exact forward pass of the relaxation's
    input values). `refine_incumbent` may replace an incumbent's reported
    value derived from MILP variables with an exact recomputation; pruning
    always uses the MILP value, which is what delta_upper brackets.
    """
    t0 = time.monotonic()
    sf = StandardForm(problem)
    binaries = [int(b) for b in problem.binary_ids]
    sos_groups = [tuple(g) for g in problem.meta.get("sos_groups", []) if len(g) > 0]
    grouped = {j for g in sos_groups for j in g}
    loose_binaries = [j for j in binaries if j not in grouped]
    base_lo = np.array([v.lo for v in problem.vars])
    base_hi = np.array([v.hi for v in problem.vars])

    tree = _Tree()
    tree_incumbent = -math.inf  # best MILP objective (pruning reference)
    reported_lower = -math.inf  # best refined/achievable value
    best_values: Optional[np.ndarray] = None
    pruned_max = -math.inf
    unresolved_max = -math.inf
    nodes = 0
    tried_patterns: set[tuple] = set()

    last_cb = (math.nan, math.nan)

    def upper_bound() -> float:
        return max(tree.best_bound(), tree_incumbent, pruned_max, unresolved_max)

    def progress():
        nonlocal last_cb
        if on_progress is None:
            return
        du = upper_bound()
        if (reported_lower, du) != last_cb:
            last_cb = (reported_lower, du)
            on_progress(reported_lower, du, nodes)

    def materialize(fixes: dict) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = base_lo.copy(), base_hi.copy()
        for j, val in fixes.items():
            lo[j] = hi[j] = float(val)
        return lo, hi

    def register_incumbent(sol_values: np.ndarray, milp_obj: float):
        nonlocal tree_incumbent, reported_lower, best_values
        if milp_obj > tree_incumbent:
            tree_incumbent = milp_obj
        value = milp_obj if refine_incumbent is None else refine_incumbent(sol_values)
        if value > reported_lower:
            reported_lower = value
            best_values = sol_values.copy()

    def is_integral(values: np.ndarray) -> bool:
        return all(abs(values[j] - round(values[j])) <= _INT_TOL for j in binaries)

    def try_completion(values: np.ndarray):
        if completion is None:
            return
        full = completion(values)
        if full is None or check_assignment(problem, full, tol=1e-7):
            return
        register_incumbent(full, problem.objective_value(full))

    def try_rounding(values: np.ndarray, fixes: dict):
        # Blockwise rounding: inside each SOS group exactly the largest
        # binary is set, which keeps the group's sum-to-one row satisfiable.
        rounded = {}
        for g in sos_groups:
            best = max(g, key=lambda j: (values[j], -j))
            for j in g:
                rounded[j] = 1 if j == best else 0
        for j in loose_binaries:
            rounded[j] = int(round(values[j]))
        pattern = tuple(rounded[j] for j in binaries)
        if pattern in tried_patterns:
            return
        tried_patterns.add(pattern)
        rfix = dict(fixes)
        rfix.update(rounded)
        lo, hi = materialize(rfix)
        try:
            sol = sf.solve(lo, hi)
        except SolverError:
            return
        if sol.status is LpStatus.OPTIMAL:
            register_incumbent(sol.values, sol.objective)

    tree.push(math.inf, {})
    status = SolveStatus.CONVERGED
    while len(tree):
        if upper_bound() - tree_incumbent <= cfg.gap_tol:
            break
        if time.monotonic() - t0 > cfg.time_cutoff_secs:
            status = SolveStatus.CUTOFF_REACHED
            break
        if nodes >= cfg.node_limit:
            status = SolveStatus.NODE_LIMIT
            break
        stored_bound, fixes = tree.pop()
        if stored_bound <= tree_incumbent + cfg.gap_tol:
            pruned_max = max(pruned_max, min(stored_bound, tree_incumbent + cfg.gap_tol))
            continue
        nodes += 1
        lo, hi = materialize(fixes)
        try:
            sol = sf.solve(lo, hi)
        except SolverError:
            unresolved_max = max(unresolved_max, stored_bound)
            progress()
            continue
        if sol.status is LpStatus.INFEASIBLE:
            progress()
            continue
        if sol.status is LpStatus.UNBOUNDED:
            raise SolverError("unbounded relaxation: encoder must box all variables")
        bound = min(sol.objective, stored_bound)
        if bound <= tree_incumbent + cfg.gap_tol:
            pruned_max = max(pruned_max, min(bound, tree_incumbent + cfg.gap_tol))
            progress()
            continue
        if is_integral(sol.values):
            register_incumbent(sol.values, sol.objective)
            progress()
            continue
        try_completion(sol.values)
        try_rounding(sol.values, fixes)
        # Branch on the most-fractional binary, lowest id on ties.
        frac_j, frac_dist = -1, -1.0
        for j in binaries:
            dist = abs(sol.values[j] - round(sol.values[j]))
            if dist > _INT_TOL and dist > frac_dist + 1e-15:
                frac_j, frac_dist = j, dist
        if frac_j < 0:
            # Numerically integral after all; treat as incumbent.
            register_incumbent(sol.values, sol.objective)
            progress()
            continue
        for val in (0.0, 1.0):
            child = dict(fixes)
            child[frac_j] = val
            tree.push(bound, child)
        progress()

    if (len(tree) == 0 and tree_incumbent == -math.inf
            and pruned_max == -math.inf and unresolved_max == -math.inf):
        raise SolverError("MILP is infeasible")
    final_upper = upper_bound()
    gap_closed = final_upper - tree_incumbent <= cfg.gap_tol
    if status is SolveStatus.CONVERGED and not gap_closed:
        status = SolveStatus.CUTOFF_REACHED
    progress()

    witness = None
    if (best_values is not None and "x_prime" in problem.var_map
            and "x_dprime" in problem.var_map):
        witness = extract_witness(problem, best_values)
    return CertificationResult(
        delta_lower=reported_lower,
        delta_upper=final_upper,
        witness=witness,
        status=status,
        nodes_explored=nodes,
        wall_time=time.monotonic() - t0,
        incumbent_values=best_values,
    )


def extract_witness(problem: MilpProblem, values: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Read the input pair off a solution and recompute their exact output gap.

    The returned delta comes from forward passes, not from the MILP's
    activation variables, so it is always a truly achievable value.
    """
    for j in problem.binary_ids:
        if abs(values[j] - round(values[j])) > _INT_TOL:
            raise ValueError(f"solution is not integral on binary variable {j}")
    net = problem.meta["net"]
    x1 = np.asarray(values[problem.var_map["x_prime"]], dtype=np.float64)
    x2 = np.asarray(values[problem.var_map["x_dprime"]], dtype=np.float64)
    delta = abs(net.forward(x1) - net.forward(x2))
    return x1, x2, delta
