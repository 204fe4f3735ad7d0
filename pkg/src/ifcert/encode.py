"""MILP over-approximation of the fairness certification and training problems.

The global problem carries two full copies of the network (inputs x' and x''),
each neuron encoded by an SOS2 selection over its PWL bounding grid; the
objective maximises the output difference delta = out' - out''. The local
problem used during training fixes one input and keeps a single copy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .bounds import LayerBounds
from .metric import FairnessMetric, PairConstraintSet, pair_constraints
from .model import FeatureSchema, NeuralNet
from .pwl import PwlGrid

__all__ = [
    "VarKind",
    "Sense",
    "MilpVar",
    "LinConstraint",
    "MilpProblem",
    "NeuronBlock",
    "EncodingError",
    "encode_neuron",
    "encode_pair_problem",
    "encode_local_problem",
    "reference_assignment",
    "to_lp_text",
]


class EncodingError(ValueError):
    """Raised for ill-formed problems or mismatched dimensions."""


class VarKind(Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


class Sense(Enum):
    LE = "<="
    EQ = "="
    GE = ">="


@dataclass(frozen=True)
class MilpVar:
    id: int
    kind: VarKind
    lo: float
    hi: float
    name: str

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise EncodingError(f"variable {self.name}: bounds must be finite")
        if self.lo > self.hi:
            raise EncodingError(f"variable {self.name}: lo={self.lo} > hi={self.hi}")
        if self.kind is VarKind.BINARY and (self.lo < 0.0 or self.hi > 1.0):
            raise EncodingError(f"variable {self.name}: binary bounds outside [0,1]")


@dataclass(frozen=True)
class LinConstraint:
    terms: tuple[tuple[int, float], ...]
    sense: Sense
    rhs: float
    name: str = ""

    def __post_init__(self):
        ids = [i for i, _ in self.terms]
        if len(ids) != len(set(ids)):
            raise EncodingError(f"constraint {self.name}: duplicate variable ids")
        if not all(math.isfinite(c) for _, c in self.terms) or not math.isfinite(self.rhs):
            raise EncodingError(f"constraint {self.name}: non-finite coefficient")


@dataclass(frozen=True)
class NeuronBlock:
    """Bookkeeping for one encoded neuron: grid plus the variable ids used."""

    grid: PwlGrid
    phi: int
    zeta: int
    eta: tuple[int, ...]
    y: tuple[int, ...]
    kind: str  # "degenerate" | "band" | "sos2"


class MilpProblem:
    """Mixed-integer linear program, objective always maximised."""

    def __init__(self):
        self.vars: list[MilpVar] = []
        self.constraints: list[LinConstraint] = []
        self.objective: dict[int, float] = {}
        self.objective_const: float = 0.0
        self.var_map: dict = {}
        self.meta: dict = {}

    def add_var(self, kind: VarKind, lo: float, hi: float, name: str) -> int:
        vid = len(self.vars)
        self.vars.append(MilpVar(id=vid, kind=kind, lo=lo, hi=hi, name=name))
        return vid

    def add_continuous(self, lo: float, hi: float, name: str) -> int:
        return self.add_var(VarKind.CONTINUOUS, lo, hi, name)

    def add_binary(self, name: str) -> int:
        return self.add_var(VarKind.BINARY, 0.0, 1.0, name)

    def add_constraint(self, terms, sense: Sense, rhs: float, name: str = "") -> None:
        terms = tuple((int(i), float(c)) for i, c in terms if c != 0.0)
        for i, _ in terms:
            if i < 0 or i >= len(self.vars):
                raise EncodingError(f"constraint {name}: unknown variable id {i}")
        self.constraints.append(LinConstraint(terms=terms, sense=sense, rhs=float(rhs), name=name))

    @property
    def num_vars(self) -> int:
        return len(self.vars)

    @property
    def num_constraints(self) -> int:
        return len(self.constraints)

    @property
    def binary_ids(self) -> list[int]:
        return [v.id for v in self.vars if v.kind is VarKind.BINARY]

    def objective_value(self, values: np.ndarray) -> float:
        return self.objective_const + sum(c * values[i] for i, c in self.objective.items())


def encode_neuron(grid: PwlGrid, phi_var: int, zeta_var: int, problem: MilpProblem,
                  tag: str = "") -> NeuronBlock:
    """Emit the SOS2 over-approximation of zeta = act(phi) over `grid`.

    Interpolation weights eta_0..eta_M tie phi to the grid and sandwich zeta
    between the PWL bound vectors; binaries y_1..y_M force at most two
    adjacent nonzero weights. Single-cell grids need no binaries (any convex
    combination of the two points is already a valid cell assignment), and a
    degenerate grid pins both variables to constants.
    """
    if grid.degenerate:
        problem.add_constraint([(phi_var, 1.0)], Sense.EQ, grid.lo, f"{tag}:phi_fix")
        problem.add_constraint([(zeta_var, 1.0)], Sense.EQ, float(grid.lower[0]), f"{tag}:zeta_fix")
        return NeuronBlock(grid=grid, phi=phi_var, zeta=zeta_var, eta=(), y=(), kind="degenerate")

    m = grid.num_cells
    eta = tuple(problem.add_continuous(0.0, 1.0, f"{tag}:eta{l}") for l in range(m + 1))
    y: tuple[int, ...] = ()
    if m >= 2:
        y = tuple(problem.add_binary(f"{tag}:y{l}") for l in range(1, m + 1))
        problem.add_constraint([(v, 1.0) for v in y], Sense.EQ, 1.0, f"{tag}:sos_y")
        problem.meta.setdefault("sos_groups", []).append(y)
    problem.add_constraint([(v, 1.0) for v in eta], Sense.EQ, 1.0, f"{tag}:sos_eta")
    problem.add_constraint(
        [(phi_var, 1.0)] + [(eta[l], -float(grid.grid[l])) for l in range(m + 1)],
        Sense.EQ, 0.0, f"{tag}:phi_interp",
    )
    for l in range(1, m + 1):
        if m >= 2:
            problem.add_constraint(
                [(y[l - 1], 1.0), (eta[l - 1], -1.0), (eta[l], -1.0)],
                Sense.LE, 0.0, f"{tag}:link{l}",
            )
    problem.add_constraint(
        [(zeta_var, 1.0)] + [(eta[l], -float(grid.lower[l])) for l in range(m + 1)],
        Sense.GE, 0.0, f"{tag}:zeta_lo",
    )
    problem.add_constraint(
        [(zeta_var, 1.0)] + [(eta[l], -float(grid.upper[l])) for l in range(m + 1)],
        Sense.LE, 0.0, f"{tag}:zeta_hi",
    )
    return NeuronBlock(grid=grid, phi=phi_var, zeta=zeta_var, eta=eta, y=y,
                       kind="sos2" if m >= 2 else "band")


def _add_input_copy(problem: MilpProblem, n: int, schema: FeatureSchema | None,
                    tag: str) -> list[int]:
    """Input variables for one copy: continuous in [0,1], categorical members
    binary with a sum-to-one constraint per declared group."""
    ids = []
    if schema is not None and schema.dim != n:
        raise EncodingError(f"schema has {schema.dim} features, network expects {n}")
    for k in range(n):
        feat = schema.features[k] if schema is not None else None
        if feat is not None and feat.kind == "categorical_member":
            ids.append(problem.add_binary(f"{tag}:x{k}"))
        else:
            ids.append(problem.add_continuous(0.0, 1.0, f"{tag}:x{k}"))
    if schema is not None:
        for gid, idx in schema.groups().items():
            problem.add_constraint([(ids[i], 1.0) for i in idx], Sense.EQ, 1.0,
                                   f"{tag}:group:{gid}")
    return ids


def _encode_network_copy(problem: MilpProblem, net: NeuralNet, layer_bounds: LayerBounds,
                         grids: list[list[PwlGrid]], input_ids: list[int],
                         tag: str) -> list[int]:
    """Affine equalities plus neuron encodings for one copy; returns the
    variable ids of the final layer activations."""
    if len(grids) != net.num_layers:
        raise EncodingError("grids do not cover all layers")
    prev = input_ids
    neurons = problem.var_map.setdefault("neurons", {})
    for i, layer in enumerate(net.layers):
        if len(grids[i]) != layer.out_width:
            raise EncodingError(f"layer {i + 1}: grid count != neuron count")
        phis, zetas = [], []
        for j in range(layer.out_width):
            g = grids[i][j]
            p_lo = float(layer_bounds.pre_lo[i][j])
            p_hi = float(layer_bounds.pre_hi[i][j])
            z_lo = float(np.min(g.lower))
            z_hi = float(np.max(g.upper))
            phi = problem.add_continuous(p_lo, p_hi, f"{tag}:phi{i + 1}_{j}")
            zeta = problem.add_continuous(z_lo, z_hi, f"{tag}:zeta{i + 1}_{j}")
            terms = [(phi, 1.0)] + [
                (prev[k], -float(layer.weights[j, k])) for k in range(layer.in_width)
            ]
            problem.add_constraint(terms, Sense.EQ, float(layer.biases[j]),
                                   f"{tag}:affine{i + 1}_{j}")
            block = encode_neuron(g, phi, zeta, problem, tag=f"{tag}:n{i + 1}_{j}")
            neurons[(tag, i, j)] = block
            phis.append(phi)
            zetas.append(zeta)
        prev = zetas
    return prev


def _add_metric_rows(problem: MilpProblem, cs: PairConstraintSet,
                     ids1: list[int], ids2: list[int], offset: np.ndarray | None = None,
                     tag: str = "metric") -> None:
    """Emit lo <= c.(v1 - v2) <= hi rows; when `offset` is given v2 is that
    constant vector instead of problem variables."""
    for r, con in enumerate(cs.constraints):
        terms = [(ids1[k], float(con.coeffs[k])) for k in range(len(ids1))]
        lo, hi = con.lo, con.hi
        if offset is not None:
            shift = float(con.coeffs @ offset)
            lo, hi = lo + shift, hi + shift
        else:
            terms += [(ids2[k], -float(con.coeffs[k])) for k in range(len(ids2))]
        problem.add_constraint(terms, Sense.LE, hi, f"{tag}:{r}:ub")
        problem.add_constraint(terms, Sense.GE, lo, f"{tag}:{r}:lb")


def encode_pair_problem(
    net: NeuralNet,
    layer_bounds: LayerBounds,
    grids: list[list[PwlGrid]],
    metric: FairnessMetric,
    eps: float,
    schema: FeatureSchema | None = None,
    emb_bounds: LayerBounds | None = None,
    emb_grids: list[list[PwlGrid]] | None = None,
) -> MilpProblem:
    """Two-copy MILP whose optimum over-approximates the worst output change
    among pairs within fairness distance eps.

    Maximising delta alone is enough: swapping the copies negates delta, so
    max delta equals max |delta|.
    """
    if metric.dim != net.input_dim and not hasattr(metric, "phi"):
        raise EncodingError(
            f"metric dimension {metric.dim} != network input {net.input_dim}")
    if net.output_dim != 1:
        raise EncodingError("pair problem needs a single-output network")
    problem = MilpProblem()
    n = net.input_dim
    x1 = _add_input_copy(problem, n, schema, "p")
    x2 = _add_input_copy(problem, n, schema, "d")
    out1 = _encode_network_copy(problem, net, layer_bounds, grids, x1, "p")
    out2 = _encode_network_copy(problem, net, layer_bounds, grids, x2, "d")

    cs = pair_constraints(metric, eps)
    if cs.space == "embedding":
        if emb_bounds is None or emb_grids is None:
            raise EncodingError("embedded metric needs embedding bounds and grids")
        emb1 = _encode_network_copy(problem, cs.embed, emb_bounds, emb_grids, x1, "ep")
        emb2 = _encode_network_copy(problem, cs.embed, emb_bounds, emb_grids, x2, "ed")
        _add_metric_rows(problem, cs, emb1, emb2)
    else:
        _add_metric_rows(problem, cs, x1, x2)

    last = net.num_layers - 1
    out_lo = float(layer_bounds.post_lo[last][0])
    out_hi = float(layer_bounds.post_hi[last][0])
    delta = problem.add_continuous(out_lo - out_hi, out_hi - out_lo, "delta")
    problem.add_constraint([(delta, 1.0), (out1[0], -1.0), (out2[0], 1.0)],
                           Sense.EQ, 0.0, "delta_def")
    problem.objective = {delta: 1.0}
    problem.var_map.update({
        "x_prime": x1,
        "x_dprime": x2,
        "output_prime": out1[0],
        "output_dprime": out2[0],
        "delta": delta,
    })
    problem.meta.update({"net": net, "metric": metric, "eps": eps, "schema": schema,
                         "kind": "pair"})
    return problem


def encode_local_problem(
    net: NeuralNet,
    layer_bounds: LayerBounds,
    grids: list[list[PwlGrid]],
    metric: FairnessMetric,
    eps: float,
    x_fixed: np.ndarray,
    schema: FeatureSchema | None = None,
    direction: int = 1,
    emb_bounds: LayerBounds | None = None,
    emb_grids: list[list[PwlGrid]] | None = None,
) -> MilpProblem:
    """Single-copy MILP maximising direction * (f(x_fixed) - f(x)) over the
    metric ball around the fixed training point.

    Unlike the pair problem there is no swap symmetry, so the training
    adversary solves both directions and keeps the larger one.
    """
    if direction not in (1, -1):
        raise EncodingError("direction must be +1 or -1")
    x0 = np.asarray(x_fixed, dtype=np.float64)
    if x0.shape != (net.input_dim,):
        raise EncodingError(f"x_fixed has shape {x0.shape}, expected ({net.input_dim},)")
    problem = MilpProblem()
    x = _add_input_copy(problem, net.input_dim, schema, "p")
    out = _encode_network_copy(problem, net, layer_bounds, grids, x, "p")

    cs = pair_constraints(metric, eps)
    if cs.space == "embedding":
        if emb_bounds is None or emb_grids is None:
            raise EncodingError("embedded metric needs embedding bounds and grids")
        emb = _encode_network_copy(problem, cs.embed, emb_bounds, emb_grids, x, "ep")
        _add_metric_rows(problem, cs, emb, [], offset=cs.embed.apply(x0))
    else:
        _add_metric_rows(problem, cs, x, [], offset=x0)

    f0 = net.forward(x0)
    problem.objective = {out[0]: -float(direction)}
    problem.objective_const = float(direction) * f0
    problem.var_map.update({"x": x, "output": out[0]})
    problem.meta.update({"net": net, "metric": metric, "eps": eps, "schema": schema,
                         "kind": "local", "x_fixed": x0, "direction": direction, "f0": f0})
    return problem


def reference_assignment(problem: MilpProblem, x_prime, x_dprime=None) -> np.ndarray:
    """Values for every problem variable realised by an exact forward pass.

    Used to check the over-approximation property: the honest assignment of
    any metric-feasible pair must satisfy every constraint of the encoding.
    """
    values = np.zeros(problem.num_vars)
    is_pair = problem.meta.get("kind") == "pair"
    net = problem.meta["net"]
    metric = problem.meta["metric"]

    def fill_copy(tag: str, copy_net: NeuralNet, input_ids: list[int], x: np.ndarray):
        values[input_ids] = x
        z = x
        for i, layer in enumerate(copy_net.layers):
            phi = layer.weights @ z + layer.biases
            z = layer.activation.apply(phi)
            for j in range(layer.out_width):
                block = problem.var_map["neurons"].get((tag, i, j))
                if block is None:
                    raise EncodingError(f"no neuron block for {(tag, i, j)}")
                values[block.phi] = phi[j]
                values[block.zeta] = z[j]
                g = block.grid
                if block.kind == "degenerate":
                    continue
                p = min(max(phi[j], g.lo), g.hi)
                idx = int(np.searchsorted(g.grid, p, side="right"))
                idx = min(max(idx, 1), g.grid.size - 1)
                a, b = g.grid[idx - 1], g.grid[idx]
                eta_left = (b - p) / (b - a)
                values[block.eta[idx - 1]] = eta_left
                values[block.eta[idx]] = 1.0 - eta_left
                if block.y:
                    values[block.y[idx - 1]] = 1.0

    x1 = np.asarray(x_prime, dtype=np.float64)
    ids1 = problem.var_map["x_prime"] if is_pair else problem.var_map["x"]
    fill_copy("p", net, ids1, x1)
    if hasattr(metric, "phi"):
        fill_copy("ep", metric.phi, ids1, x1)
    if is_pair:
        x2 = np.asarray(x_dprime, dtype=np.float64)
        ids2 = problem.var_map["x_dprime"]
        fill_copy("d", net, ids2, x2)
        if hasattr(metric, "phi"):
            fill_copy("ed", metric.phi, ids2, x2)
        values[problem.var_map["delta"]] = net.forward(x1) - net.forward(x2)
    return values


def check_assignment(problem: MilpProblem, values: np.ndarray,
                     tol: float = 1e-7) -> list[str]:
    """Names of constraints/bounds violated by `values` (empty if feasible)."""
    bad = []
    for v in problem.vars:
        if values[v.id] < v.lo - tol or values[v.id] > v.hi + tol:
            bad.append(f"bound:{v.name}")
    for con in problem.constraints:
        lhs = sum(c * values[i] for i, c in con.terms)
        if con.sense is Sense.LE and lhs > con.rhs + tol:
            bad.append(con.name)
        elif con.sense is Sense.GE and lhs < con.rhs - tol:
            bad.append(con.name)
        elif con.sense is Sense.EQ and abs(lhs - con.rhs) > tol:
            bad.append(con.name)
    return bad


def to_lp_text(problem: MilpProblem) -> str:
    """Render the problem in CPLEX LP text format for external cross-checks."""
    def vname(i: int) -> str:
        return f"v{i}"

    lines = ["Maximize", " obj:"]
    obj_terms = [f" {c:+.17g} {vname(i)}" for i, c in sorted(problem.objective.items())]
    lines[-1] += "".join(obj_terms) if obj_terms else " 0 v0"
    lines.append("Subject To")
    for k, con in enumerate(problem.constraints):
        body = "".join(f" {c:+.17g} {vname(i)}" for i, c in con.terms)
        lines.append(f" c{k}:{body} {con.sense.value} {con.rhs:.17g}")
    lines.append("Bounds")
    for v in problem.vars:
        lines.append(f" {v.lo:.17g} <= {vname(v.id)} <= {v.hi:.17g}")
    binaries = problem.binary_ids
    if binaries:
        lines.append("Binaries")
        lines.append(" " + " ".join(vname(i) for i in binaries))
    lines.append("End")
    return "\n".join(lines) + "\n"
