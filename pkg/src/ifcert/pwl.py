"""Global piecewise-linear lower/upper bounds on activations over a pre-activation interval.

Each neuron gets a grid over [lo, hi] that contains every kink/inflection of
the activation, so every cell is entirely convex, concave or linear. On a
convex cell the chord is an upper bound and the tangent at the cell midpoint
is a lower bound (mirrored on concave cells). Values of adjacent cells'
bounding lines are aggregated at shared grid points (min of lower candidates,
max of upper candidates), which yields continuous PWL bounds that sandwich
the activation over the whole interval.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bounds import LayerBounds
from .model import Activation, NeuralNet

__all__ = ["PwlGrid", "build_grid", "eval_pwl", "error_bounds", "build_network_grids"]


@dataclass(frozen=True)
class PwlGrid:
    """Strictly increasing grid with PWL lower/upper bound values at each point."""

    act: Activation
    grid: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        for name in ("grid", "lower", "upper"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.grid.shape == self.lower.shape == self.upper.shape):
            raise ValueError("grid/lower/upper must have equal lengths")
        if self.grid.size >= 2 and np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")

    @property
    def num_cells(self) -> int:
        return max(self.grid.size - 1, 0)

    @property
    def degenerate(self) -> bool:
        return self.grid.size == 1

    @property
    def lo(self) -> float:
        return float(self.grid[0])

    @property
    def hi(self) -> float:
        return float(self.grid[-1])

    def is_exact(self, tol: float = 1e-12) -> bool:
        return bool(np.all(self.upper - self.lower <= tol))


def _piece_interior_points(act: Activation, a: float, b: float, cells: int) -> np.ndarray:
    """Interior grid points for one convex/concave/linear piece [a, b].

    Smooth activations subdivide the output range uniformly and map back
    through the inverse (grid follows the y-axis); piecewise-linear
    activations subdivide the x-axis uniformly (placement is irrelevant
    there, the bounds are exact).
    """
    if cells <= 1:
        return np.empty(0)
    if act.piecewise_linear:
        return np.linspace(a, b, cells + 1)[1:-1]
    ya = float(act.apply(np.float64(a)))
    yb = float(act.apply(np.float64(b)))
    if abs(yb - ya) < 1e-12:  # saturated tail; fall back to uniform x
        return np.linspace(a, b, cells + 1)[1:-1]
    ys = np.linspace(ya, yb, cells + 1)[1:-1]
    xs = np.array([act.inverse(y) for y in ys])
    # Guard against round-trip drift out of the piece.
    return np.clip(xs, a, b)


def _allocate_cells(shares: list[float], total: int) -> list[int]:
    """Split `total` cells across pieces proportionally, at least 1 each."""
    n = len(shares)
    if total <= n:
        return [1] * n
    s = sum(shares)
    if s <= 0:
        shares = [1.0] * n
        s = float(n)
    raw = [sh / s * total for sh in shares]
    counts = [max(1, int(r)) for r in raw]
    # Largest-remainder correction towards the exact total.
    while sum(counts) < total:
        rem = [r - c for r, c in zip(raw, counts)]
        counts[rem.index(max(rem))] += 1
    while sum(counts) > total:
        rem = [r - c if c > 1 else np.inf for r, c in zip(raw, counts)]
        counts[rem.index(min(rem))] -= 1
    return counts


def build_grid(act: Activation, lo: float, hi: float, m: int) -> PwlGrid:
    """Build the PWL bounding grid for `act` over [lo, hi] with m cells.

    Kinks/inflections inside (lo, hi) are always inserted, even if that
    exceeds m cells by one: cell-wise convexity/concavity is a hard
    precondition of the chord/tangent construction.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValueError("interval endpoints must be finite")
    if lo > hi:
        raise ValueError(f"empty interval: lo={lo} > hi={hi}")
    if lo == hi:
        v = float(act.apply(np.float64(lo)))
        point = np.array([lo])
        return PwlGrid(act=act, grid=point, lower=np.array([v]), upper=np.array([v]))

    splits = [p for p in act.breakpoints if lo < p < hi]
    edges = [lo] + splits + [hi]
    pieces = list(zip(edges[:-1], edges[1:]))
    if act.piecewise_linear:
        shares = [b - a for a, b in pieces]
    else:
        shares = [abs(float(act.apply(np.float64(b))) - float(act.apply(np.float64(a))))
                  for a, b in pieces]
    cells = _allocate_cells(shares, m)

    points = [lo]
    for (a, b), k in zip(pieces, cells):
        points.extend(_piece_interior_points(act, a, b, k))
        points.append(b)
    grid = np.array(sorted(set(float(p) for p in points)))

    n = grid.size
    lower = np.full(n, np.inf)
    upper = np.full(n, -np.inf)
    sig = act.apply(grid)
    for l in range(n - 1):
        a, b = float(grid[l]), float(grid[l + 1])
        kind = act.curvature(a, b)
        if kind == "linear":
            lo_a, lo_b = sig[l], sig[l + 1]
            up_a, up_b = sig[l], sig[l + 1]
        else:
            c = 0.5 * (a + b)
            sc = float(act.apply(np.float64(c)))
            dc = float(act.derivative(np.float64(c)))
            tan_a, tan_b = sc + dc * (a - c), sc + dc * (b - c)
            if kind == "convex":
                lo_a, lo_b = tan_a, tan_b
                up_a, up_b = sig[l], sig[l + 1]
            else:
                lo_a, lo_b = sig[l], sig[l + 1]
                up_a, up_b = tan_a, tan_b
        lower[l] = min(lower[l], lo_a)
        lower[l + 1] = min(lower[l + 1], lo_b)
        upper[l] = max(upper[l], up_a)
        upper[l + 1] = max(upper[l + 1], up_b)
    return PwlGrid(act=act, grid=grid, lower=lower, upper=upper)


def eval_pwl(g: PwlGrid, phi: float) -> tuple[float, float]:
    """Linear interpolation of the lower/upper bound vectors at phi."""
    if g.degenerate:
        if phi != g.lo:
            raise ValueError(f"phi={phi} outside degenerate grid point {g.lo}")
        return float(g.lower[0]), float(g.upper[0])
    if phi < g.lo or phi > g.hi:
        raise ValueError(f"phi={phi} outside grid interval [{g.lo}, {g.hi}]")
    idx = int(np.searchsorted(g.grid, phi, side="right"))
    idx = min(max(idx, 1), g.grid.size - 1)
    a, b = g.grid[idx - 1], g.grid[idx]
    eta = (b - phi) / (b - a)
    lb = eta * g.lower[idx - 1] + (1.0 - eta) * g.lower[idx]
    ub = eta * g.upper[idx - 1] + (1.0 - eta) * g.upper[idx]
    return float(lb), float(ub)


def error_bounds(act: Activation, cell: tuple[float, float]) -> tuple[float, float]:
    """Analytic per-cell error bounds of the PWL construction.

    Returns (e1, e2): e1 bounds the tangent-side error, e2 the chord-side
    error, for a cell of width D lying in a single convex or concave region:

        e1 <= (D/2) * (s'(r) - s'(r - D/2))    with r the endpoint where |s'|
                                               is largest in the region
        e2 <= D * ((s(l + D) - s(l)) / D + s'(l))

    Concave cells use the point reflection of the convex formulas.
    """
    a, b = float(cell[0]), float(cell[1])
    if a > b:
        raise ValueError("cell must satisfy a <= b")
    kind = act.curvature(a, b)  # raises if the cell spans a breakpoint
    d = b - a
    if kind == "linear" or d == 0.0:
        if d == 0.0:
            return 0.0, 0.0
        slope = (float(act.apply(np.float64(b))) - float(act.apply(np.float64(a)))) / d
        return 0.0, d * (slope + float(act.derivative(np.float64(a))))
    sa = float(act.apply(np.float64(a)))
    sb = float(act.apply(np.float64(b)))
    chord = (sb - sa) / d
    if kind == "convex":
        e1 = (d / 2.0) * (
            float(act.derivative(np.float64(b))) - float(act.derivative(np.float64(b - d / 2.0)))
        )
        e2 = d * (chord + float(act.derivative(np.float64(a))))
    else:
        e1 = (d / 2.0) * (
            float(act.derivative(np.float64(a))) - float(act.derivative(np.float64(a + d / 2.0)))
        )
        e2 = d * (chord + float(act.derivative(np.float64(b))))
    return float(e1), float(e2)


def effective_cells(act: Activation, lo: float, hi: float, m: int) -> int:
    """Grid size actually needed for a neuron: PWL activations are encoded
    exactly with one cell per linear piece, smooth activations use m cells."""
    if not act.piecewise_linear:
        return m
    pieces = 1 + sum(1 for p in act.breakpoints if lo < p < hi)
    return min(m, pieces) if m >= 1 else pieces


def build_network_grids(net: NeuralNet, layer_bounds: LayerBounds, m: int) -> list[list[PwlGrid]]:
    """Per-neuron grids over the propagated pre-activation intervals.

    `m` controls the cell count of smooth activations; ReLU/identity neurons
    get the minimal exact grid (their over-approximation is exact for any
    cell count, so extra cells would only add binaries to the MILP).
    """
    grids: list[list[PwlGrid]] = []
    for i, layer in enumerate(net.layers):
        row = []
        for j in range(layer.out_width):
            lo = float(layer_bounds.pre_lo[i][j])
            hi = float(layer_bounds.pre_hi[i][j])
            cells = effective_cells(layer.activation, lo, hi, m)
            row.append(build_grid(layer.activation, lo, hi, cells))
        grids.append(row)
    return grids
