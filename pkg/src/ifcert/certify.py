"""End-to-end certification pipeline: bounds -> PWL grids -> MILP -> solver."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .bounds import propagate_bounds
from .encode import MilpProblem, encode_pair_problem, reference_assignment
from .metric import Embedded, FairnessMetric
from .model import FeatureSchema, NeuralNet
from .pwl import build_network_grids
from .solve import CertificationResult, SolveConfig, branch_and_bound, extract_witness

__all__ = ["build_pair_problem", "certify_network"]


def build_pair_problem(
    net: NeuralNet,
    metric: FairnessMetric,
    eps: float,
    schema: FeatureSchema | None = None,
    grid_m: int = 32,
) -> MilpProblem:
    """Assemble the two-copy certification MILP for `net` under `metric`."""
    schema_box = (schema or FeatureSchema.continuous(net.input_dim)).input_box()
    layer_bounds = propagate_bounds(net, schema_box)
    grids = build_network_grids(net, layer_bounds, grid_m)
    emb_bounds = emb_grids = None
    if isinstance(metric, Embedded):
        emb_bounds = propagate_bounds(metric.phi, schema_box)
        emb_grids = build_network_grids(metric.phi, emb_bounds, grid_m)
    return encode_pair_problem(
        net, layer_bounds, grids, metric, eps, schema=schema,
        emb_bounds=emb_bounds, emb_grids=emb_grids,
    )


def certify_network(
    net: NeuralNet,
    metric: FairnessMetric,
    eps: float,
    schema: FeatureSchema | None = None,
    grid_m: int = 32,
    cfg: SolveConfig = SolveConfig(),
    on_progress: Optional[Callable[[float, float, int], None]] = None,
) -> CertificationResult:
    """Certified bracket on the worst output change among eps-similar pairs.

    The returned delta_upper certifies the network eps-delta-fair for every
    delta >= delta_upper; delta_lower is achieved by the witness pair.
    """
    problem = build_pair_problem(net, metric, eps, schema=schema, grid_m=grid_m)

    def refine(values: np.ndarray) -> float:
        return extract_witness(problem, values)[2]

    def complete(values: np.ndarray) -> np.ndarray:
        x1 = np.asarray(values[problem.var_map["x_prime"]])
        x2 = np.asarray(values[problem.var_map["x_dprime"]])
        if net.forward(x1) < net.forward(x2):  # swap keeps delta non-negative
            x1, x2 = x2, x1
        return reference_assignment(problem, x1, x2)

    return branch_and_bound(problem, cfg, on_progress=on_progress,
                            refine_incumbent=refine, completion=complete)
