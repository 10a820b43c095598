"""Pixel decoder MLP, supervised contrastive loss and the SGD training loop."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import AggregatedFeatures
from .fusion import BACKGROUND_CAP, SeedSelection
from .tensorio import load_array, save_array

log = logging.getLogger(__name__)

NORM_EPS = 1e-8
NORM_TOL = 1e-4
_BLOCK = 256


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    tau: float = 0.1
    lr: float = 1.0
    epochs: int = 5
    batch_images: int = 4
    seed: int = 0
    background_cap: int = BACKGROUND_CAP
    cam_threshold: float = 0.5
    mg_threshold: float = 0.5
    hidden: tuple = (16, 16, 16, 16)
    standardize: bool = True
    pool_batch: bool = True
    # "mean" divides the summed loss by the number of anchors before the SGD step
    reduction: str = "mean"
    # precision of the N x N similarity blocks during training
    loss_dtype: str = "float32"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if len(self.hidden) < 1:
            raise ValueError("decoder needs at least one layer after the input")


@dataclass
class PixelEmbeddingMap:
    data: np.ndarray  # H x W x O float32
    normalized: bool = True


@dataclass
class PixelDecoder:
    weights: list  # W_l with shape (fan_in, fan_out)
    biases: list
    normalize: bool = True
    seed: int | None = None
    # per-channel input standardization, (x - shift) / scale
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None

    @classmethod
    def init(cls, sizes, seed: int = 0, dtype=np.float32, normalize: bool = True) -> "PixelDecoder":
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2:
            raise ValueError("decoder needs at least an input and an output size")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(weights, biases, normalize, seed)

    @property
    def sizes(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "PixelDecoder":
        return PixelDecoder(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.normalize,
            self.seed,
            None if self.shift is None else self.shift.copy(),
            None if self.scale is None else self.scale.copy(),
        )

    def forward(self, x: np.ndarray):
        """Map N x D features to N x O embeddings; returns (z, cache)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ValueError(f"expected N x {self.sizes[0]} features, got {x.shape}")
        if self.shift is not None:
            x = (x - self.shift.astype(np.float64)) / self.scale.astype(np.float64)
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w.astype(np.float64) + b.astype(np.float64)
            pre.append(a)
            h = np.maximum(a, 0.0) if i < last else a
            acts.append(h)
        norms = np.sqrt(np.sum(h * h, axis=1, keepdims=True))
        z = h / np.maximum(norms, NORM_EPS) if self.normalize else h
        return z, (acts, pre, norms, z)

    def backward(self, cache, grad_z: np.ndarray) -> list:
        """Chain dL/dz back through normalization and the layers; returns [dW0, db0, dW1, ...]."""
        acts, pre, norms, z = cache
        g = np.asarray(grad_z, dtype=np.float64)
        if self.normalize:
            # d(y/|y|) = (I - z z^T) / |y|; zero-norm rows are clamped to eps
            g = (g - z * np.sum(z * g, axis=1, keepdims=True)) / np.maximum(norms, NORM_EPS)
        grads = [None] * (2 * len(self.weights))
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                g = g * (pre[i] > 0)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self.weights[i].astype(np.float64).T
        return grads

    def sgd_step(self, grads: list, lr: float) -> None:
        if lr == 0:
            return
        params = self.parameters()
        for p, g in zip(params, grads):
            p[...] = (p.astype(np.float64) - lr * g).astype(p.dtype)
        for p in params:
            if not np.all(np.isfinite(p)):
                raise TrainingError("non-finite parameter after SGD update")

    def decode(self, features) -> PixelEmbeddingMap:
        data = features.data if isinstance(features, AggregatedFeatures) else np.asarray(features)
        h, w, d = data.shape
        if d != self.sizes[0]:
            raise ValueError(f"feature dim {d} does not match decoder input {self.sizes[0]}")
        z, (_, _, norms, _) = self.forward(data.reshape(-1, d))
        ok = bool(self.normalize and np.all(norms >= NORM_EPS))
        return PixelEmbeddingMap(z.astype(np.float32).reshape(h, w, -1), normalized=ok)


def decode(features, net: PixelDecoder) -> PixelEmbeddingMap:
    return net.decode(features)


def _check_unit(z: np.ndarray) -> None:
    norms = np.linalg.norm(z, axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        raise ValueError("embeddings must be unit-norm")


def supcon_loss_and_grad(
    z: np.ndarray,
    labels: np.ndarray,
    tau: float,
    require_unit: bool = True,
    need_grad: bool = True,
    dtype=np.float64,
):
    """Summed supervised contrastive loss over anchors and its gradient w.r.t. ``z``.

    Anchors without another same-label sample contribute nothing. The
    positive-pair part is linear in the embeddings and is computed from
    per-class sums; the log-denominator part is evaluated over row blocks of
    the similarity matrix so large pixel batches fit in memory. Summation
    order is fixed.
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    n = z.shape[0]
    if n < 2:
        raise ValueError("need at least two embeddings")
    if require_unit:
        _check_unit(z)
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    n_pos = counts[inverse] - 1
    valid = n_pos > 0
    class_sums = np.zeros((len(classes), z.shape[1]))
    np.add.at(class_sums, inverse, z)
    # sum_{j in positives(i)} z_j, for every anchor
    pos_sum = class_sums[inverse] - z
    safe = np.maximum(n_pos, 1)[:, None]
    total = -float(np.sum(np.where(valid, np.sum(z * pos_sum, axis=1) / safe[:, 0], 0.0))) / tau

    grad = None
    if need_grad:
        grad = np.where(valid[:, None], -2.0 * pos_sum / safe, 0.0) / tau
    zc = z.astype(dtype)
    zc_scaled = zc / dtype(tau)
    lse_total = 0.0
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        rows = np.arange(stop - start)
        logits = zc_scaled[start:stop] @ zc.T
        logits[rows, rows + start] = -np.inf
        row_max = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - row_max)
        denom = e.sum(axis=1, keepdims=True)
        v = valid[start:stop]
        lse = row_max[:, 0].astype(np.float64) + np.log(denom[:, 0].astype(np.float64))
        lse_total += float(lse[v].sum())
        if need_grad:
            p = e / denom
            p[~v] = 0
            grad[start:stop] += (p @ zc).astype(np.float64) / tau
            grad += (p.T @ zc[start:stop]).astype(np.float64) / tau
    return total + lse_total, grad


def supcon_loss(z: np.ndarray, labels: np.ndarray, tau: float = 0.1, require_unit: bool = True) -> float:
    return supcon_loss_and_grad(z, labels, tau, require_unit, need_grad=False)[0]


def supcon_grad(z: np.ndarray, labels: np.ndarray, tau: float = 0.1, require_unit: bool = True) -> np.ndarray:
    return supcon_loss_and_grad(z, labels, tau, require_unit)[1]


def _features_of(item) -> np.ndarray:
    return item.data if isinstance(item, AggregatedFeatures) else np.asarray(item)


def feature_stats(features) -> tuple:
    """Per-channel mean and std over every pixel of every image (float32)."""
    total = None
    sq = None
    count = 0
    for f in features:
        flat = _features_of(f).reshape(-1, _features_of(f).shape[2]).astype(np.float64)
        total = flat.sum(axis=0) if total is None else total + flat.sum(axis=0)
        sq = (flat * flat).sum(axis=0) if sq is None else sq + (flat * flat).sum(axis=0)
        count += len(flat)
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean * mean, 0.0))
    std[std < 1e-6] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def _seed_batch(feats: np.ndarray, seeds: SeedSelection):
    flat = feats.reshape(-1, feats.shape[2])
    x = np.concatenate([flat[seeds.foreground], flat[seeds.background]])
    y = np.concatenate([np.ones(len(seeds.foreground), np.int8), np.zeros(len(seeds.background), np.int8)])
    return x, y


def _loss_step(net: PixelDecoder, x: np.ndarray, y: np.ndarray, cfg: TrainConfig):
    z, cache = net.forward(x)
    loss, gz = supcon_loss_and_grad(z, y, cfg.tau, dtype=np.dtype(cfg.loss_dtype).type)
    if loss < -1e-9 * len(y):
        raise TrainingError(f"negative contrastive loss {loss}")
    scale = 1.0 / len(y) if cfg.reduction == "mean" else 1.0
    return loss * scale, net.backward(cache, gz * scale)


@dataclass
class TrainResult:
    net: PixelDecoder
    batch_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)


def train_decoder(dataset, cfg: TrainConfig | None = None, net: PixelDecoder | None = None) -> TrainResult:
    """Train on a list of (features, SeedSelection) pairs with plain SGD.

    Each epoch shuffles the images, groups them into batches of
    ``cfg.batch_images`` and pools every seed pixel of the batch into one
    contrastive batch (or averages per-image losses when ``pool_batch`` is
    off). Images flagged ``skip`` are left out.
    """
    cfg = cfg or TrainConfig()
    usable = [i for i, (_, s) in enumerate(dataset) if not s.skip and len(s.foreground) > 0]
    if not usable:
        raise TrainingError("no supervisory pixels: every image has an empty foreground")
    dim = _features_of(dataset[usable[0]][0]).shape[2]
    if net is None:
        net = PixelDecoder.init([dim, *cfg.hidden], seed=cfg.seed)
        if cfg.standardize:
            net.shift, net.scale = feature_stats([dataset[i][0] for i in usable])
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(net)
    for epoch in range(cfg.epochs):
        order = rng.permutation(usable)
        losses = []
        for start in range(0, len(order), cfg.batch_images):
            members = order[start : start + cfg.batch_images]
            parts = [_seed_batch(_features_of(dataset[i][0]), dataset[i][1]) for i in members]
            if cfg.pool_batch:
                x = np.concatenate([p[0] for p in parts])
                y = np.concatenate([p[1] for p in parts])
                if len(y) < 2:
                    continue
                loss, grads = _loss_step(net, x, y, cfg)
            else:
                parts = [p for p in parts if len(p[1]) >= 2]
                if not parts:
                    continue
                loss, grads = 0.0, None
                for x, y in parts:
                    l_i, g_i = _loss_step(net, x, y, cfg)
                    loss += l_i / len(parts)
                    grads = [g / len(parts) for g in g_i] if grads is None else [a + g / len(parts) for a, g in zip(grads, g_i)]
            net.sgd_step(grads, cfg.lr)
            losses.append(loss)
        result.batch_losses.extend(losses)
        result.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("epoch %d mean loss %.5f", epoch + 1, result.epoch_losses[-1])
    return result


def save_checkpoint(net: PixelDecoder, directory, config: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        wname, bname = f"layer{i}_weight.cldf", f"layer{i}_bias.cldf"
        save_array(directory / wname, w, "HW")
        save_array(directory / bname, b.reshape(1, -1), "HW")
        layers.append({"weight": wname, "bias": bname})
    if net.shift is not None:
        save_array(directory / "input_shift.cldf", net.shift.reshape(1, -1), "HW")
        save_array(directory / "input_scale.cldf", net.scale.reshape(1, -1), "HW")
    manifest = {
        "sizes": net.sizes,
        "activation": "relu",
        "normalize": net.normalize,
        "seed": net.seed,
        "layers": layers,
        "standardized": net.shift is not None,
        "config": config or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory) -> PixelDecoder:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    weights = [load_array(directory / layer["weight"]) for layer in manifest["layers"]]
    biases = [load_array(directory / layer["bias"]).reshape(-1) for layer in manifest["layers"]]
    net = PixelDecoder(weights, biases, manifest["normalize"], manifest.get("seed"))
    if manifest.get("standardized"):
        net.shift = load_array(directory / "input_shift.cldf").reshape(-1)
        net.scale = load_array(directory / "input_scale.cldf").reshape(-1)
    return net


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d
