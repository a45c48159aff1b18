"""Two-layer alpha masks: activation, softmax + maxout, flow composition.

Order of operations on the logit grid: activation -> softmax over the two
layers -> maxout (keep the per-pixel maximum, zero the other; layer 0 wins
ties).
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .affine import FlowField
from .events import SensorGeometry

ACTIVATIONS = ("leaky_dorelu", "leaky_relu")


@dataclass(frozen=True)
class ActivationConfig:
    kind: str = "leaky_dorelu"
    gamma: float = 100.0

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}; choose from {ACTIVATIONS}")
        if not np.isfinite(self.gamma) or self.gamma <= 1:
            raise ValueError("gamma must be finite and > 1")


def leaky_dorelu(x, gamma=100.0):
    """Identity on [0, 1], slope 1/gamma outside."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 1, 1 + (x - 1) / gamma, np.where(x < 0, x / gamma, x))
    return out if out.ndim else float(out)


def leaky_relu(x, gamma=100.0):
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x < 0, x / gamma, x)
    return out if out.ndim else float(out)


def activation_derivative(x, cfg: ActivationConfig):
    x = np.asarray(x, dtype=np.float64)
    slope = 1.0 / cfg.gamma
    if cfg.kind == "leaky_dorelu":
        return np.where((x >= 0) & (x <= 1), 1.0, slope)
    return np.where(x >= 0, 1.0, slope)


@dataclass(frozen=True, eq=False)
class LayerLogits:
    geometry: SensorGeometry
    values: np.ndarray  # (2, H, W)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (2,) + self.geometry.shape:
            raise ValueError(f"logits shape {v.shape} does not match (2, {self.geometry.height}, "
                             f"{self.geometry.width})")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True, eq=False)
class AlphaMasks:
    geometry: SensorGeometry
    values: np.ndarray  # (2, H, W), exactly one nonzero per pixel
    winner: np.ndarray  # (H, W) int, index of the nonzero layer


def apply_activation(logits: LayerLogits, cfg: ActivationConfig) -> LayerLogits:
    f = leaky_dorelu if cfg.kind == "leaky_dorelu" else leaky_relu
    return LayerLogits(logits.geometry, f(logits.values, cfg.gamma))


def softmax2(values):
    """Softmax over axis 0 of a (2, H, W) array; returns the (2, H, W) probabilities."""
    d = values[0] - values[1]
    return np.stack([expit(d), expit(-d)])


def softmax_maxout(logits: LayerLogits) -> AlphaMasks:
    soft = softmax2(logits.values)
    winner = (logits.values[1] > logits.values[0]).astype(np.int64)
    vals = np.zeros_like(soft)
    vals[0] = np.where(winner == 0, soft[0], 0.0)
    vals[1] = np.where(winner == 1, soft[1], 0.0)
    return AlphaMasks(logits.geometry, vals, winner)


def compose_flow(masks: AlphaMasks, w1: FlowField, w2: FlowField) -> FlowField:
    if not (masks.geometry == w1.geometry == w2.geometry):
        raise ValueError("mask and flow geometries differ")
    a0, a1 = masks.values
    return FlowField(masks.geometry, a0 * w1.u + a1 * w2.u, a0 * w1.v + a1 * w2.v)


def hard_masks(masks: AlphaMasks):
    """Boolean (2, H, W) array: pixel belongs to the layer holding its nonzero alpha."""
    return np.stack([masks.winner == 0, masks.winner == 1])
