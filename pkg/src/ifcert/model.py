"""Fully-connected network representation, exact evaluation, and JSON model/schema I/O."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

__all__ = [
    "Activation",
    "Layer",
    "NeuralNet",
    "Feature",
    "FeatureSchema",
    "ModelError",
    "forward",
    "load_model",
    "save_model",
    "load_schema",
    "save_schema",
]


class ModelError(ValueError):
    """Raised for malformed networks, schemas, or model files."""


class Activation(str, Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    IDENTITY = "identity"

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self is Activation.RELU:
            return np.maximum(x, 0.0)
        if self is Activation.SIGMOID:
            return _stable_sigmoid(x)
        if self is Activation.TANH:
            return np.tanh(x)
        return x.copy()

    def derivative(self, x: np.ndarray) -> np.ndarray:
        """Pointwise derivative; the ReLU subgradient at 0 is taken as 0."""
        x = np.asarray(x, dtype=np.float64)
        if self is Activation.RELU:
            return (x > 0.0).astype(np.float64)
        if self is Activation.SIGMOID:
            s = _stable_sigmoid(x)
            return s * (1.0 - s)
        if self is Activation.TANH:
            t = np.tanh(x)
            return 1.0 - t * t
        return np.ones_like(x)

    def inverse(self, y: float) -> float:
        """Inverse map, defined for the strictly monotone smooth activations."""
        if self is Activation.SIGMOID:
            return math.log(y / (1.0 - y))
        if self is Activation.TANH:
            return math.atanh(y)
        raise ModelError(f"{self.value} has no inverse map")

    @property
    def breakpoints(self) -> tuple[float, ...]:
        """Kink (ReLU) or inflection (sigmoid/tanh) locations."""
        if self is Activation.IDENTITY:
            return ()
        return (0.0,)

    @property
    def piecewise_linear(self) -> bool:
        return self in (Activation.RELU, Activation.IDENTITY)

    def curvature(self, a: float, b: float) -> str:
        """Curvature class on [a, b]: 'linear', 'convex' or 'concave'.

        The interval must not contain a breakpoint in its interior.
        """
        for p in self.breakpoints:
            if a < p < b:
                raise ModelError(f"interval [{a}, {b}] spans a breakpoint of {self.value}")
        if self.piecewise_linear:
            return "linear"
        mid = 0.5 * (a + b)
        return "convex" if mid <= 0.0 else "concave"


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch on sign so exp never overflows.
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _frozen_array(a, shape_name: str, expect_ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != expect_ndim:
        raise ModelError(f"{shape_name} must have {expect_ndim} dimension(s), got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{shape_name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Layer:
    """One affine layer with activation: z = act(W x + b).

    Row j of `weights` holds the incoming weights of neuron j.
    """

    weights: np.ndarray
    biases: np.ndarray
    activation: Activation

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen_array(self.weights, "weights", 2))
        object.__setattr__(self, "biases", _frozen_array(self.biases, "biases", 1))
        if self.weights.shape[0] != self.biases.shape[0]:
            raise ModelError(
                f"weights rows ({self.weights.shape[0]}) != biases length ({self.biases.shape[0]})"
            )
        if not isinstance(self.activation, Activation):
            object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def in_width(self) -> int:
        return self.weights.shape[1]

    @property
    def out_width(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class NeuralNet:
    """Immutable layered fully-connected network.

    Decision networks have a single output; wider outputs are permitted only
    for embedding networks used inside fairness metrics.
    """

    layers: tuple[Layer, ...]
    input_dim: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ModelError("network needs at least one layer")
        width = self.input_dim
        for i, layer in enumerate(self.layers, start=1):
            if layer.in_width != width:
                raise ModelError(
                    f"layer {i}: expects input width {layer.in_width}, previous width is {width}"
                )
            width = layer.out_width

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_width

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def apply(self, x) -> np.ndarray:
        """Evaluate the network, returning the output vector."""
        z = np.asarray(x, dtype=np.float64)
        if z.shape != (self.input_dim,):
            raise ModelError(f"input has shape {z.shape}, expected ({self.input_dim},)")
        if not np.all(np.isfinite(z)):
            raise ModelError("input contains non-finite entries")
        for layer in self.layers:
            z = layer.activation.apply(layer.weights @ z + layer.biases)
        return z

    def apply_batch(self, X) -> np.ndarray:
        """Evaluate rows of X; returns an array of shape (rows, output_dim)."""
        Z = np.asarray(X, dtype=np.float64)
        if Z.ndim != 2 or Z.shape[1] != self.input_dim:
            raise ModelError(f"batch has shape {Z.shape}, expected (*, {self.input_dim})")
        for layer in self.layers:
            Z = layer.activation.apply(Z @ layer.weights.T + layer.biases)
        return Z

    def forward(self, x) -> float:
        if self.output_dim != 1:
            raise ModelError("forward() requires a single-output network; use apply()")
        return float(self.apply(x)[0])


def forward(net: NeuralNet, x) -> float:
    """Exact forward pass of a single-output network."""
    return net.forward(x)


def _layer_from_json(obj: dict, index: int) -> Layer:
    try:
        weights = obj["weights"]
        biases = obj["biases"]
        activation = Activation(obj["activation"])
    except (KeyError, ValueError) as exc:
        raise ModelError(f"layer {index}: {exc}") from exc
    try:
        return Layer(weights=weights, biases=biases, activation=activation)
    except ModelError as exc:
        raise ModelError(f"layer {index}: {exc}") from exc


def load_model(path, allow_multi_output: bool = False) -> NeuralNet:
    """Load a network from the JSON model format.

    Multi-output networks are rejected unless `allow_multi_output` is set
    (certification of several outputs is done with per-component runs).
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(obj, dict) or "input_dim" not in obj or "layers" not in obj:
        raise ModelError(f"{path}: expected an object with 'input_dim' and 'layers'")
    layers = [_layer_from_json(l, i) for i, l in enumerate(obj["layers"], start=1)]
    net = NeuralNet(layers=tuple(layers), input_dim=int(obj["input_dim"]))
    if net.output_dim != 1 and not allow_multi_output:
        raise ModelError(
            f"network has {net.output_dim} outputs; certify one component at a time "
            "(re-run per output with a single-output model)"
        )
    return net


def save_model(net: NeuralNet, path) -> None:
    obj = {
        "input_dim": net.input_dim,
        "layers": [
            {
                "weights": layer.weights.tolist(),
                "biases": layer.biases.tolist(),
                "activation": layer.activation.value,
            }
            for layer in net.layers
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)


# ---------------------------------------------------------------------------
# Feature schema


@dataclass(frozen=True)
class Feature:
    """A single model-input column.

    Continuous features carry their original-unit domain [lo, hi]; the model
    consumes them min-max normalised to [0, 1]. Categorical members are 0/1
    columns belonging to a one-hot group.
    """

    name: str
    kind: str  # "continuous" | "categorical_member"
    sensitive: bool = False
    lo: float = 0.0
    hi: float = 1.0
    group: str | None = None

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical_member"):
            raise ModelError(f"feature {self.name}: unknown kind {self.kind!r}")
        if self.kind == "continuous" and not self.lo <= self.hi:
            raise ModelError(f"feature {self.name}: lo > hi")
        if self.kind == "categorical_member" and not self.group:
            raise ModelError(f"feature {self.name}: categorical member needs a group id")


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered input features plus which of them are sensitive."""

    features: tuple[Feature, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        for group, idx in self.groups().items():
            if len(idx) < 2:
                raise ModelError(f"categorical group {group!r} has fewer than 2 members")

    @property
    def dim(self) -> int:
        return len(self.features)

    @property
    def sensitive_names(self) -> frozenset[str]:
        return frozenset(f.name for f in self.features if f.sensitive)

    def sensitive_indices(self) -> list[int]:
        return [i for i, f in enumerate(self.features) if f.sensitive]

    def groups(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for i, f in enumerate(self.features):
            if f.kind == "categorical_member":
                out.setdefault(f.group, []).append(i)
        return out

    def input_box(self) -> np.ndarray:
        """Normalised per-feature domain, shape (dim, 2); all features in [0,1]."""
        box = np.zeros((self.dim, 2))
        box[:, 1] = 1.0
        return box

    def denormalize(self, x) -> np.ndarray:
        """Map a normalised input vector back to original units."""
        x = np.asarray(x, dtype=np.float64)
        out = x.copy()
        for i, f in enumerate(self.features):
            if f.kind == "continuous":
                out[i] = f.lo + x[i] * (f.hi - f.lo)
        return out

    @staticmethod
    def continuous(n: int) -> "FeatureSchema":
        """Default schema: n non-sensitive continuous features on [0, 1]."""
        return FeatureSchema(
            features=tuple(Feature(name=f"x{i}", kind="continuous") for i in range(n))
        )


def load_schema(path) -> FeatureSchema:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    feats = []
    for f in obj["features"]:
        feats.append(
            Feature(
                name=f["name"],
                kind=f["kind"],
                sensitive=bool(f.get("sensitive", False)),
                lo=float(f.get("lo", 0.0)),
                hi=float(f.get("hi", 1.0)),
                group=f.get("group"),
            )
        )
    return FeatureSchema(features=tuple(feats))


def save_schema(schema: FeatureSchema, path) -> None:
    feats = []
    for f in schema.features:
        entry = {"name": f.name, "kind": f.kind, "sensitive": f.sensitive}
        if f.kind == "continuous":
            entry["lo"] = f.lo
            entry["hi"] = f.hi
        else:
            entry["group"] = f.group
        feats.append(entry)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"features": feats}, fh)
