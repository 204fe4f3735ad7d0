"""Global pre/post-activation interval bounds over the whole input domain."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import NeuralNet

__all__ = ["LayerBounds", "propagate_bounds"]


@dataclass(frozen=True)
class LayerBounds:
    """Per-layer interval bounds: pre-activation and activation, one entry per layer."""

    pre_lo: tuple[np.ndarray, ...]
    pre_hi: tuple[np.ndarray, ...]
    post_lo: tuple[np.ndarray, ...]
    post_hi: tuple[np.ndarray, ...]

    def __post_init__(self):
        for lo, hi in zip(self.pre_lo, self.pre_hi):
            if np.any(lo > hi):
                raise ValueError("pre-activation bounds violate lo <= hi")


def propagate_bounds(net: NeuralNet, input_box: np.ndarray) -> LayerBounds:
    """Interval bound propagation through the network over `input_box`.

    The affine step splits weights into positive/negative parts; the
    activation step maps interval endpoints through the monotone activation.
    Sound for every input in the box: the true pre-activation of neuron j in
    layer i always lies in [pre_lo[i][j], pre_hi[i][j]].
    """
    box = np.asarray(input_box, dtype=np.float64)
    if box.shape != (net.input_dim, 2):
        raise ValueError(f"input_box has shape {box.shape}, expected ({net.input_dim}, 2)")
    if not np.all(np.isfinite(box)):
        raise ValueError("input_box contains non-finite entries")
    if np.any(box[:, 0] > box[:, 1]):
        raise ValueError("input_box violates lo <= hi")

    lo, hi = box[:, 0].copy(), box[:, 1].copy()
    pre_lo, pre_hi, post_lo, post_hi = [], [], [], []
    for layer in net.layers:
        w_pos = np.maximum(layer.weights, 0.0)
        w_neg = np.minimum(layer.weights, 0.0)
        p_lo = w_pos @ lo + w_neg @ hi + layer.biases
        p_hi = w_pos @ hi + w_neg @ lo + layer.biases
        a_lo = layer.activation.apply(p_lo)
        a_hi = layer.activation.apply(p_hi)
        pre_lo.append(p_lo)
        pre_hi.append(p_hi)
        post_lo.append(a_lo)
        post_hi.append(a_hi)
        lo, hi = a_lo, a_hi
    return LayerBounds(
        pre_lo=tuple(pre_lo), pre_hi=tuple(pre_hi),
        post_lo=tuple(post_lo), post_hi=tuple(post_hi),
    )
