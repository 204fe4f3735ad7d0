"""Certified epsilon-delta individual fairness for fully-connected networks.

Certification solves a global two-input MILP over-approximation built from
piecewise-linear activation bounds; training uses the same machinery as a
per-sample adversary. The MILP is solved by a built-in anytime
branch-and-bound with a bounded-variable primal simplex core.
"""

from .bounds import LayerBounds, propagate_bounds
from .certify import build_pair_problem, certify_network
from .encode import (LinConstraint, MilpProblem, MilpVar, Sense, VarKind,
                     encode_local_problem, encode_neuron, encode_pair_problem)
from .metric import (Embedded, FairnessMetric, Mahalanobis, WeightedLp,
                     eigendecompose, eval_metric, learn_mahalanobis,
                     load_metric, pair_constraints, save_metric)
from .model import (Activation, FeatureSchema, Layer, NeuralNet, forward,
                    load_model, load_schema, save_model, save_schema)
from .pwl import PwlGrid, build_grid, error_bounds, eval_pwl
from .simplex import LpSolution, LpStatus, solve_lp
from .solve import (CertificationResult, SolveConfig, SolveStatus,
                    branch_and_bound, extract_witness)
from .train import (Gradients, LossKind, TrainConfig, backward, fair_loss,
                    find_worst_case, init_network, loss, loss_grad, train_fair,
                    train_standard)

__version__ = "0.1.0"
