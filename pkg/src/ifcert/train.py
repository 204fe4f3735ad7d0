"""Standard and fairness-regularised training with from-scratch backprop.

The fair loss blends the task loss with the output gap to a worst-case
similar input found by a per-sample MILP adversary; the adversarial input is
treated as a constant when differentiating.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .bounds import propagate_bounds
from .encode import encode_local_problem, reference_assignment
from .metric import Embedded, FairnessMetric
from .model import Activation, FeatureSchema, Layer, NeuralNet
from .pwl import build_network_grids
from .simplex import SolverError
from .solve import SolveConfig, branch_and_bound

__all__ = [
    "LossKind",
    "TrainConfig",
    "Gradients",
    "loss",
    "loss_grad",
    "fair_loss",
    "backward",
    "find_worst_case",
    "train_fair",
    "train_standard",
    "init_network",
    "bce_clamp_count",
]


class LossKind(Enum):
    BCE = "binary_cross_entropy"
    MSE = "mean_squared_error"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    l2_reg: float = 0.0
    n_epoch: int = 20
    n_batch: int = 32
    lam: float = 0.5
    lambda_switch_epoch: Optional[int] = None
    eps: float = 0.2
    loss_kind: LossKind = LossKind.BCE
    solve_cfg: SolveConfig = field(
        default_factory=lambda: SolveConfig(time_cutoff_secs=5.0))
    grid_m: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")

    def switch_epoch(self) -> int:
        """First epoch (1-based) that uses the fair lambda; earlier epochs train plainly."""
        if self.lambda_switch_epoch is not None:
            return self.lambda_switch_epoch
        return math.ceil(self.n_epoch / 2) + 1


@dataclass
class Gradients:
    dW: list[np.ndarray]
    db: list[np.ndarray]

    def __iadd__(self, other: "Gradients") -> "Gradients":
        for a, b in zip(self.dW, other.dW):
            a += b
        for a, b in zip(self.db, other.db):
            a += b
        return self

    def scale(self, s: float) -> None:
        for a in self.dW:
            a *= s
        for a in self.db:
            a *= s


_bce_clamps = 0


def bce_clamp_count() -> int:
    """How many BCE evaluations needed clamping away from {0, 1}."""
    return _bce_clamps


def _clamp_pred(pred: float) -> float:
    global _bce_clamps
    if pred < 1e-12 or pred > 1.0 - 1e-12:
        _bce_clamps += 1
        return min(max(pred, 1e-12), 1.0 - 1e-12)
    return pred


def loss(pred: float, y: float, kind: LossKind) -> float:
    if kind is LossKind.MSE:
        return (pred - y) ** 2
    p = _clamp_pred(pred)
    return -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))


def loss_grad(pred: float, y: float, kind: LossKind) -> float:
    if kind is LossKind.MSE:
        return 2.0 * (pred - y)
    p = _clamp_pred(pred)
    return (p - y) / (p * (1.0 - p))


def fair_loss(pred_clean: float, y: float, pred_adv: float, lam: float,
              kind: LossKind) -> float:
    """lam * task loss + (1 - lam) * |pred_clean - pred_adv|."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    return lam * loss(pred_clean, y, kind) + (1.0 - lam) * abs(pred_clean - pred_adv)


def _forward_trace(net: NeuralNet, x: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    phis, zetas = [], [np.asarray(x, dtype=np.float64)]
    for layer in net.layers:
        phi = layer.weights @ zetas[-1] + layer.biases
        phis.append(phi)
        zetas.append(layer.activation.apply(phi))
    return phis, zetas


def _backward_from_trace(net: NeuralNet, phis, zetas, upstream: float) -> Gradients:
    dW = [np.zeros_like(l.weights) for l in net.layers]
    db = [np.zeros_like(l.biases) for l in net.layers]
    dz = np.array([float(upstream)])
    for i in reversed(range(net.num_layers)):
        layer = net.layers[i]
        dphi = dz * layer.activation.derivative(phis[i])
        dW[i] = np.outer(dphi, zetas[i])
        db[i] = dphi
        dz = layer.weights.T @ dphi
    return Gradients(dW=dW, db=db)


def backward(net: NeuralNet, x, upstream_grad: float = 1.0) -> Gradients:
    """Gradient of the (scalar) network output w.r.t. all weights and biases."""
    phis, zetas = _forward_trace(net, np.asarray(x, dtype=np.float64))
    return _backward_from_trace(net, phis, zetas, upstream_grad)


def find_worst_case(
    net: NeuralNet,
    x_i: np.ndarray,
    metric: FairnessMetric,
    eps: float,
    solve_cfg: SolveConfig,
    schema: FeatureSchema | None = None,
    grid_m: int = 32,
) -> np.ndarray:
    """Worst output-gap point within metric distance eps of x_i.

    Solves the local MILP in both objective directions (no swap symmetry for
    a fixed point) and returns the witness with the larger recomputed gap.
    On solver failure the sample itself is returned, zeroing that sample's
    fairness term for the batch.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    if eps == 0.0:
        return x_i.copy()
    box = (schema or FeatureSchema.continuous(net.input_dim)).input_box()
    try:
        layer_bounds = propagate_bounds(net, box)
        grids = build_network_grids(net, layer_bounds, grid_m)
        emb_bounds = emb_grids = None
        if isinstance(metric, Embedded):
            emb_bounds = propagate_bounds(metric.phi, box)
            emb_grids = build_network_grids(metric.phi, emb_bounds, grid_m)
        f0 = net.forward(x_i)
        best_x, best_gap = x_i.copy(), 0.0
        for direction in (1, -1):
            problem = encode_local_problem(
                net, layer_bounds, grids, metric, eps, x_i, schema=schema,
                direction=direction, emb_bounds=emb_bounds, emb_grids=emb_grids)

            def refine(values: np.ndarray) -> float:
                x_cand = values[problem.var_map["x"]]
                return direction * (f0 - net.forward(x_cand))

            def complete(values: np.ndarray) -> np.ndarray:
                return reference_assignment(problem, values[problem.var_map["x"]])

            result = branch_and_bound(problem, solve_cfg, refine_incumbent=refine,
                                      completion=complete)
            if result.incumbent_values is None:
                continue
            x_cand = np.asarray(result.incumbent_values[problem.var_map["x"]])
            gap = abs(f0 - net.forward(x_cand))
            if gap > best_gap:
                best_x, best_gap = x_cand.copy(), gap
        return best_x
    except SolverError:
        return x_i.copy()


def init_network(dims: list[int], activations: list[Activation], seed: int = 0) -> NeuralNet:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    rng = np.random.default_rng(seed)
    layers = []
    for i, act in enumerate(activations):
        fan_in = dims[i]
        bound = 1.0 / math.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(dims[i + 1], dims[i]))
        b = rng.uniform(-bound, bound, size=dims[i + 1])
        layers.append(Layer(weights=W, biases=b, activation=act))
    return NeuralNet(layers=tuple(layers), input_dim=dims[0])


def _rebuild(net: NeuralNet, weights, biases) -> NeuralNet:
    layers = tuple(
        Layer(weights=W, biases=b, activation=l.activation)
        for W, b, l in zip(weights, biases, net.layers)
    )
    return NeuralNet(layers=layers, input_dim=net.input_dim)


def _run_sgd(
    net_init: NeuralNet,
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    adversary: Optional[Callable[[NeuralNet, np.ndarray], np.ndarray]],
    on_epoch: Optional[Callable[[dict], None]],
) -> NeuralNet:
    rng = np.random.default_rng(cfg.rng_seed)
    weights = [l.weights.copy() for l in net_init.layers]
    biases = [l.biases.copy() for l in net_init.layers]
    rows = X.shape[0]
    switch = cfg.switch_epoch()

    for epoch in range(1, cfg.n_epoch + 1):
        t_start = time.monotonic()
        lam = 1.0 if epoch < switch else cfg.lam
        order = rng.permutation(rows)
        epoch_loss, epoch_fair = 0.0, 0.0
        for start in range(0, rows, cfg.n_batch):
            batch = order[start:start + cfg.n_batch]
            net = _rebuild(net_init, weights, biases)
            gW = [np.zeros_like(w) for w in weights]
            gb = [np.zeros_like(b) for b in biases]
            for idx in batch:
                x = X[idx]
                phis, zetas = _forward_trace(net, x)
                pred = float(zetas[-1][0])
                dl = loss_grad(pred, float(y[idx]), cfg.loss_kind)
                g = _backward_from_trace(net, phis, zetas, lam * dl)
                epoch_loss += loss(pred, float(y[idx]), cfg.loss_kind)
                if lam < 1.0 and adversary is not None:
                    x_adv = adversary(net, x)
                    pred_adv = net.forward(x_adv)
                    epoch_fair += abs(pred - pred_adv)
                    sgn = float(np.sign(pred - pred_adv))
                    if sgn != 0.0:
                        g += _backward_from_trace(net, phis, zetas, (1.0 - lam) * sgn)
                        g_adv = backward(net, x_adv, (1.0 - lam) * sgn)
                        g_adv.scale(-1.0)
                        g += g_adv
                for a, b_ in zip(gW, g.dW):
                    a += b_
                for a, b_ in zip(gb, g.db):
                    a += b_
            inv = 1.0 / len(batch)
            for i in range(len(weights)):
                weights[i] -= cfg.learning_rate * (gW[i] * inv + cfg.l2_reg * weights[i])
                biases[i] -= cfg.learning_rate * (gb[i] * inv)
        if on_epoch is not None:
            on_epoch({
                "epoch": epoch,
                "mean_loss": epoch_loss / rows,
                "mean_fair_term": epoch_fair / rows,
                "wall_time": time.monotonic() - t_start,
            })
    return _rebuild(net_init, weights, biases)


def train_fair(
    net_init: NeuralNet,
    dataset: tuple[np.ndarray, np.ndarray],
    metric: FairnessMetric,
    cfg: TrainConfig,
    schema: FeatureSchema | None = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> NeuralNet:
    """MILP-adversarial fair training.

    Plain SGD for the first half of the epochs (lambda = 1), then each batch
    additionally penalises the gap to a per-sample worst-case similar input
    found by the local MILP. Bounds and grids are rebuilt per sample because
    the weights change every step.
    """
    X, y = np.asarray(dataset[0], dtype=np.float64), np.asarray(dataset[1], dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("dataset is empty")

    def adversary(net: NeuralNet, x: np.ndarray) -> np.ndarray:
        return find_worst_case(net, x, metric, cfg.eps, cfg.solve_cfg,
                               schema=schema, grid_m=cfg.grid_m)

    return _run_sgd(net_init, X, y, cfg, adversary, on_epoch)


def train_standard(
    net_init: NeuralNet,
    dataset: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    drop_sensitive: bool = False,
    schema: FeatureSchema | None = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> NeuralNet:
    """Plain SGD; with drop_sensitive, sensitive columns are zeroed at
    ingestion (dimensions stay stable so the result can still be certified)."""
    X, y = np.asarray(dataset[0], dtype=np.float64), np.asarray(dataset[1], dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("dataset is empty")
    if drop_sensitive:
        if schema is None:
            raise ValueError("drop_sensitive requires a schema")
        X = X.copy()
        X[:, schema.sensitive_indices()] = 0.0
    cfg = replace(cfg, lambda_switch_epoch=cfg.n_epoch + 1)  # lambda stays 1
    return _run_sgd(net_init, X, y, cfg, None, on_epoch)
