"""Per-pixel saliency: externally produced CAMs and the classifier mean-gradient map."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .diffusion import NoiseSchedule, forward_noise, timestep_seed
from .tensorio import read_tensor

CAM = "CAM"
MEAN_GRADIENT = "MEAN_GRADIENT"
GRADIENT_TIMESTEPS = tuple(range(10, 201, 10))


class ShapeMismatchError(ValueError):
    pass


@dataclass
class ActivationMap:
    data: np.ndarray  # H x W float32 in [0, 1]
    kind: str
    degenerate: bool = False  # set when the raw map was constant


class DifferentiableClassifier(Protocol):
    def predict(self, x: np.ndarray) -> float: ...

    def input_gradient(self, x: np.ndarray) -> np.ndarray: ...


def minmax_normalize(values: np.ndarray, kind: str) -> ActivationMap:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("activation map contains non-finite values")
    lo, hi = values.min(), values.max()
    if hi == lo:
        return ActivationMap(np.zeros(values.shape, np.float32), kind, degenerate=True)
    out = ((values - lo) / (hi - lo)).astype(np.float32)
    return ActivationMap(np.clip(out, 0.0, 1.0), kind)


class LogisticClassifier:
    """p = sigmoid(<w, x> + b); the log-probability gradient is (1 - p) w."""

    def __init__(self, weights: np.ndarray, bias: float = 0.0):
        weights = np.asarray(weights, dtype=np.float64)
        if not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite")
        self.weights = weights
        self.bias = float(bias)

    def logit(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=np.float64).reshape(self.weights.shape)
        return float(np.sum(self.weights * x) + self.bias)

    def predict(self, x: np.ndarray) -> float:
        z = self.logit(x)
        # stable sigmoid
        if z >= 0:
            return 1.0 / (1.0 + np.exp(-z))
        e = np.exp(z)
        return e / (1.0 + e)

    def log_predict(self, x: np.ndarray) -> float:
        return -float(np.logaddexp(0.0, -self.logit(x)))

    def input_gradient(self, x: np.ndarray) -> np.ndarray:
        # 1 - sigmoid(z) == sigmoid(-z), evaluated without cancellation
        z = self.logit(x)
        one_minus_p = np.exp(-np.logaddexp(0.0, z))
        return (one_minus_p * self.weights).astype(np.float32)


def toy_logistic_classifier(weights: np.ndarray, bias: float = 0.0) -> LogisticClassifier:
    return LogisticClassifier(weights, bias)


def mean_gradient_map(
    x0: np.ndarray,
    clf: DifferentiableClassifier,
    schedule: NoiseSchedule | None = None,
    timesteps: Sequence[int] = GRADIENT_TIMESTEPS,
    seed: int = 0,
    signed: bool = False,
) -> ActivationMap:
    """Average the channel-reduced input gradient over noisy copies of ``x0``.

    Each gradient is reduced to one value per pixel by the L2 norm over
    channels, or by the channel sum when ``signed`` is set (in which case the
    absolute value is taken only after averaging).
    """
    schedule = schedule or NoiseSchedule.linear()
    x0 = np.asarray(x0, dtype=np.float32)
    if x0.ndim == 2:
        x0 = x0[:, :, None]
    acc = np.zeros(x0.shape[:2], dtype=np.float64)
    for t in timesteps:
        xt = forward_noise(x0, t, schedule, timestep_seed(seed, t))
        g = np.asarray(clf.input_gradient(xt), dtype=np.float64).reshape(x0.shape)
        acc += g.sum(axis=2) if signed else np.sqrt(np.sum(g * g, axis=2))
    acc /= len(timesteps)
    if signed:
        acc = np.abs(acc)
    return minmax_normalize(acc, MEAN_GRADIENT)


def load_cam(path, shape: tuple | None = None) -> ActivationMap:
    container = read_tensor(path)
    if container.layout != "HW":
        raise ShapeMismatchError(f"CAM must use HW layout, got {container.layout}")
    if shape is not None and tuple(container.shape) != tuple(shape[:2]):
        raise ShapeMismatchError(f"CAM shape {container.shape} does not match image {tuple(shape[:2])}")
    return minmax_normalize(container.data, CAM)
