"""Forward noising and aggregation of per-layer features into a per-pixel stack."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .tensorio import read_tensor

DEFAULT_TIMESTEPS = (1, 10, 50, 100)

# (x_t, t) -> list of h_i x w_i x c_i blocks
FeatureProvider = Callable[[np.ndarray, int], list]


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule; ``alphas_bar[t - 1]`` is the cumulative product at step t."""

    alphas_bar: np.ndarray

    @classmethod
    def linear(cls, num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
        return cls(np.cumprod(1.0 - betas))

    @property
    def num_steps(self) -> int:
        return len(self.alphas_bar)

    def alpha_bar(self, t: int) -> float:
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"timestep {t} outside [1, {self.num_steps}]")
        return float(self.alphas_bar[t - 1])


def timestep_seed(seed: int, t: int) -> int:
    return (int(seed) ^ int(t)) & 0xFFFFFFFFFFFFFFFF


def forward_noise(x0: np.ndarray, t: int, schedule: NoiseSchedule, seed: int) -> np.ndarray:
    """Sample x_t = sqrt(a_t) x0 + sqrt(1 - a_t) eps with eps ~ N(0, I)."""
    return _noise_with_alpha(x0, schedule.alpha_bar(t), seed)


def _noise_with_alpha(x0: np.ndarray, alpha_bar: float, seed: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float32)
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 contains non-finite values")
    eps = np.random.default_rng(seed).standard_normal(x0.shape)
    if alpha_bar == 1.0:
        return x0.copy()
    out = np.sqrt(alpha_bar) * x0.astype(np.float64) + np.sqrt(1.0 - alpha_bar) * eps
    return out.astype(np.float32)


def _axis_weights(n_src: int, n_dst: int):
    # corner-aligned: dst 0 -> src 0, dst n_dst-1 -> src n_src-1
    if n_src == 1 or n_dst == 1:
        pos = np.zeros(n_dst)
    else:
        pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    lo = np.clip(np.floor(pos).astype(int), 0, n_src - 1)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = pos - lo
    return lo, hi, frac


def upsample(block: np.ndarray, height: int, width: int, mode: str = "bilinear") -> np.ndarray:
    """Resize an h x w x c block to height x width x c."""
    block = np.asarray(block, dtype=np.float64)
    h, w = block.shape[:2]
    if (h, w) == (height, width):
        return block.copy()
    if mode == "nearest":
        rows = np.minimum((np.arange(height) * h) // height, h - 1)
        cols = np.minimum((np.arange(width) * w) // width, w - 1)
        return block[rows][:, cols]
    if mode != "bilinear":
        raise ValueError(f"unknown upsample mode {mode!r}")
    r0, r1, fr = _axis_weights(h, height)
    c0, c1, fc = _axis_weights(w, width)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = block[r0][:, c0] * (1 - fc) + block[r0][:, c1] * fc
    bottom = block[r1][:, c0] * (1 - fc) + block[r1][:, c1] * fc
    out = top * (1 - fr) + bottom * fr
    # convex weights can still round a hair outside the source range
    return np.clip(out, block.min(), block.max())


@dataclass
class AggregatedFeatures:
    data: np.ndarray  # H x W x D float32
    timesteps_used: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return int(self.data.shape[2])


def extract_features(
    x0: np.ndarray,
    provider: FeatureProvider,
    timesteps: Sequence[int] = DEFAULT_TIMESTEPS,
    schedule: NoiseSchedule | None = None,
    seed: int = 0,
    upsample_mode: str = "bilinear",
) -> AggregatedFeatures:
    schedule = schedule or NoiseSchedule.linear()
    x0 = np.asarray(x0, dtype=np.float32)
    if x0.ndim == 2:
        x0 = x0[:, :, None]
    height, width = x0.shape[:2]
    total = None
    channels = None
    for t in timesteps:
        xt = forward_noise(x0, t, schedule, timestep_seed(seed, t))
        blocks = provider(xt, t)
        sizes = [int(b.shape[2]) for b in blocks]
        if channels is None:
            channels = sizes
        elif sizes != channels:
            raise ValueError(f"provider channel sizes changed across timesteps: {channels} vs {sizes}")
        for b in blocks:
            if b.shape[0] > height or b.shape[1] > width:
                raise ValueError(f"feature block {b.shape} larger than image {height}x{width}")
        ft = np.concatenate([upsample(b, height, width, upsample_mode) for b in blocks], axis=2)
        total = ft if total is None else total + ft
    mean = total / len(timesteps)
    return AggregatedFeatures(mean.astype(np.float32), list(timesteps))


@dataclass(frozen=True)
class ToyProviderConfig:
    scales: tuple = (1, 2, 4)
    sigmas: tuple = (1.0, 2.0)
    include_raw: bool = True
    include_gradient: bool = True


class ToyFeatureProvider:
    """Stand-in for frozen diffusion decoder features.

    For each scale factor s the noisy image is block-averaged by s and
    yields raw intensity, Gaussian smoothings and the Sobel gradient
    magnitude of the widest smoothing. Pure function of its input, so it is
    safe to share across threads.
    """

    def __init__(self, config: ToyProviderConfig | None = None):
        self.config = config or ToyProviderConfig()

    def channels_per_input_channel(self) -> int:
        c = self.config
        per_scale = len(c.sigmas) + int(c.include_raw) + int(c.include_gradient)
        return per_scale * len(c.scales)

    def __call__(self, xt: np.ndarray, t: int) -> list:
        xt = np.asarray(xt, dtype=np.float64)
        if xt.ndim == 2:
            xt = xt[:, :, None]
        blocks = []
        for s in self.config.scales:
            img = _block_mean(xt, s)
            chans = []
            for ch in range(img.shape[2]):
                plane = img[:, :, ch]
                if self.config.include_raw:
                    chans.append(plane)
                smooth = plane
                for sigma in self.config.sigmas:
                    smooth = ndimage.gaussian_filter(plane, sigma / s, mode="nearest")
                    chans.append(smooth)
                if self.config.include_gradient:
                    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
                    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
                    chans.append(np.hypot(gx, gy))
            blocks.append(np.stack(chans, axis=2).astype(np.float32))
        return blocks


def _block_mean(img: np.ndarray, s: int) -> np.ndarray:
    if s == 1:
        return img
    h, w, c = img.shape
    hh, ww = max(h // s, 1), max(w // s, 1)
    cropped = img[: hh * s, : ww * s]
    return cropped.reshape(hh, s, ww, s, c).mean(axis=(1, 3))


class FileFeatureProvider:
    """Features exported by an external diffusion model.

    ``directory`` holds one NHWC ``.cldf`` file per timestep named
    ``t{t:04d}.cldf``; N indexes images. The noisy input is ignored since
    the exporter already ran the model.
    """

    def __init__(self, directory, image_index: int):
        self.directory = Path(directory)
        self.image_index = image_index

    def path_for(self, t: int) -> Path:
        return self.directory / f"t{t:04d}.cldf"

    def __call__(self, xt: np.ndarray, t: int) -> list:
        container = read_tensor(self.path_for(t))
        if container.layout != "NHWC":
            raise ValueError(f"{self.path_for(t)}: expected NHWC layout, got {container.layout}")
        return [container.data[self.image_index]]
