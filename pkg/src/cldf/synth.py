"""Synthetic scenes with CAM-like and gradient-like saliency maps.

A scene is a smooth background with bright elliptical target blobs and a
few dimmer non-target structures. ``degrade_cam`` mimics a CAM that finds
the object but spills over its boundary and misses part of it;
``degrade_gradient`` mimics a classifier gradient map with a tight
boundary plus scattered background responses.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .saliency import CAM, MEAN_GRADIENT, ActivationMap, minmax_normalize
from .tensorio import save_array


class SceneSpecError(ValueError):
    pass


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    channels: int = 1
    n_blobs: int = 1
    radius_range: tuple = (8.0, 14.0)
    axis_ratio_range: tuple = (0.6, 1.0)
    # intensities roughly span [-1, 1], the usual diffusion-model input range
    contrast: float = 1.2
    background_level: float = -0.6
    background_variation: float = 0.2
    noise_std: float = 0.05
    n_distractors: int = 2
    distractor_contrast: float = 0.6
    centered: bool = False
    seed: int = 0


@dataclass
class CamSpec:
    dilate_px: int = 2
    blur_sigma: float = 1.5
    miss_rate: float = 0.35
    seed: int = 0


@dataclass
class GradientSpec:
    boundary_jitter_px: float = 1.0
    speckle_count: int = 12
    speckle_radius: int = 2
    background_noise: float = 0.15
    seed: int = 0


def _ellipse(h, w, cy, cx, ry, rx, angle):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def disk(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    return _ellipse(h, w, cy, cx, r, r, 0.0)


def _place(rng, spec, occupied, r_lo, r_hi, centered=False, tries=200):
    h, w = spec.height, spec.width
    for _ in range(tries):
        r = rng.uniform(r_lo, r_hi)
        ratio = rng.uniform(*spec.axis_ratio_range)
        angle = rng.uniform(0, np.pi)
        if centered:
            cy, cx = (h - 1) / 2, (w - 1) / 2
        else:
            cy = rng.uniform(r + 1, h - r - 2)
            cx = rng.uniform(r + 1, w - r - 2)
        shape = _ellipse(h, w, cy, cx, r, r * ratio, angle)
        grown = ndimage.binary_dilation(shape, iterations=2)
        if not (grown & occupied).any():
            return shape
        if centered:
            break
    return None


def gen_scene(spec: SceneSpec | None = None):
    """Return (image H x W x C float32, ground-truth mask H x W uint8)."""
    spec = spec or SceneSpec()
    h, w = spec.height, spec.width
    if h < 8 or w < 8 or spec.channels < 1:
        raise SceneSpecError("scene must be at least 8x8 with one channel")
    r_lo, r_hi = spec.radius_range
    if spec.n_blobs and (r_lo <= 0 or r_hi < r_lo or 2 * r_hi + 4 > min(h, w)):
        raise SceneSpecError(f"blob radius range {spec.radius_range} cannot fit a {h}x{w} image")
    rng = np.random.default_rng(spec.seed)

    gt = np.zeros((h, w), dtype=bool)
    for k in range(spec.n_blobs):
        blob = _place(rng, spec, gt, r_lo, r_hi, centered=spec.centered and k == 0)
        if blob is None:
            raise SceneSpecError(f"could not fit blob {k + 1} of {spec.n_blobs}")
        gt |= blob
    distractors = np.zeros((h, w), dtype=bool)
    for _ in range(spec.n_distractors):
        shape = _place(rng, spec, gt | distractors, max(r_lo / 2, 1.0), max(r_hi / 2, 1.5))
        if shape is not None:
            distractors |= shape

    field = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 8, mode="reflect")
    field /= np.abs(field).max() or 1.0
    image = np.empty((h, w, spec.channels), dtype=np.float64)
    soft_gt = ndimage.gaussian_filter(gt.astype(np.float64), 0.7)
    soft_dis = ndimage.gaussian_filter(distractors.astype(np.float64), 0.7)
    for c in range(spec.channels):
        weight = 1.0 / (1.0 + 0.5 * c)
        image[:, :, c] = (
            spec.background_level
            + spec.background_variation * field
            + weight * spec.contrast * soft_gt
            + weight * spec.distractor_contrast * soft_dis
            + spec.noise_std * rng.standard_normal((h, w))
        )
    return image.astype(np.float32), gt.astype(np.uint8)


def _disk_struct(r: int) -> np.ndarray:
    return disk(2 * r + 1, 2 * r + 1, r, r, r + 0.5)


def degrade_cam(gt: np.ndarray, spec: CamSpec | None = None) -> ActivationMap:
    """Dilate, blur and partially suppress the ground truth."""
    spec = spec or CamSpec()
    gt = np.asarray(gt).astype(bool)
    if spec.miss_rate >= 1.0 or not gt.any():
        return ActivationMap(np.zeros(gt.shape, np.float32), CAM, degenerate=True)
    rng = np.random.default_rng(spec.seed)
    m = gt
    if spec.dilate_px > 0:
        m = ndimage.binary_dilation(gt, structure=_disk_struct(spec.dilate_px))
    out = m.astype(np.float64)
    if spec.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, spec.blur_sigma, mode="constant")
    if spec.miss_rate > 0:
        # drop the part of the object lying furthest along a random direction
        theta = rng.uniform(0, 2 * np.pi)
        ys, xs = np.nonzero(gt)
        yy, xx = np.mgrid[0 : gt.shape[0], 0 : gt.shape[1]]
        proj = np.cos(theta) * xx + np.sin(theta) * yy
        cut = np.quantile(proj[ys, xs], 1.0 - spec.miss_rate)
        out = np.where(proj > cut, 0.0, out)
    return minmax_normalize(out, CAM)


def degrade_gradient(gt: np.ndarray, spec: GradientSpec | None = None) -> ActivationMap:
    """Jitter the object boundary and add speckles and low-level noise in the background."""
    spec = spec or GradientSpec()
    gt = np.asarray(gt).astype(bool)
    rng = np.random.default_rng(spec.seed)
    h, w = gt.shape
    m = gt
    if spec.boundary_jitter_px > 0 and gt.any():
        inside = ndimage.distance_transform_edt(gt)
        outside = ndimage.distance_transform_edt(~gt)
        signed = np.where(gt, inside - 0.5, -(outside - 0.5))
        wobble = ndimage.gaussian_filter(rng.standard_normal((h, w)), 2.0)
        wobble *= spec.boundary_jitter_px / (np.abs(wobble).max() or 1.0)
        m = signed + wobble > 0
    out = m.astype(np.float64)
    if spec.background_noise > 0:
        noise = spec.background_noise * rng.uniform(0, 1, (h, w))
        out = np.maximum(out, np.where(m, 0.0, noise))
    if spec.speckle_count > 0:
        forbidden = ndimage.binary_dilation(gt, iterations=spec.speckle_radius + 2) if gt.any() else gt
        candidates = np.flatnonzero(~forbidden)
        if len(candidates) < spec.speckle_count:
            raise SceneSpecError("not enough background to place speckles")
        centers = rng.choice(candidates, size=spec.speckle_count, replace=False)
        for c in centers:
            cy, cx = divmod(int(c), w)
            spot = disk(h, w, cy, cx, spec.speckle_radius + 0.5) & ~gt
            spot.flat[c] = True
            out = np.maximum(out, spot * rng.uniform(0.7, 1.0))
    return minmax_normalize(out, MEAN_GRADIENT)


@dataclass
class SynthConfig:
    n_scenes: int = 20
    scene: SceneSpec = None
    cam: CamSpec = None
    gradient: GradientSpec = None

    def __post_init__(self):
        self.scene = _coerce(SceneSpec, self.scene)
        self.cam = _coerce(CamSpec, self.cam)
        self.gradient = _coerce(GradientSpec, self.gradient)


def _coerce(cls, value):
    if value is None:
        return cls()
    if isinstance(value, dict):
        fields = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
        return cls(**fields)
    return value


@dataclass
class Sample:
    name: str
    image: np.ndarray
    gt: np.ndarray
    cam: ActivationMap
    gradient: ActivationMap


def scene_seeds(base_seed: int, index: int) -> tuple:
    """Independent per-scene seeds for the scene, CAM and gradient degradations."""
    ss = np.random.SeedSequence([int(base_seed), int(index)])
    return tuple(int(s) for s in ss.generate_state(3, dtype=np.uint32))


def gen_dataset(cfg: SynthConfig | None = None, seed: int = 0) -> list:
    cfg = cfg or SynthConfig()
    out = []
    for i in range(cfg.n_scenes):
        s_scene, s_cam, s_grad = scene_seeds(seed, i)
        image, gt = gen_scene(_with_seed(cfg.scene, s_scene))
        cam = degrade_cam(gt, _with_seed(cfg.cam, s_cam))
        grad = degrade_gradient(gt, _with_seed(cfg.gradient, s_grad))
        out.append(Sample(f"{i:04d}", image, gt, cam, grad))
    return out


def _with_seed(spec, seed):
    d = asdict(spec)
    d["seed"] = seed
    return type(spec)(**d)


def write_dataset(directory, samples: list, config: dict | None = None) -> dict:
    directory = Path(directory)
    for sub in ("images", "gt", "cam", "grad"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        save_array(directory / "images" / f"{s.name}.cldf", s.image, "HWC")
        save_array(directory / "gt" / f"{s.name}.cldf", s.gt.astype(np.uint8), "HW")
        save_array(directory / "cam" / f"{s.name}.cldf", s.cam.data, "HW")
        save_array(directory / "grad" / f"{s.name}.cldf", s.gradient.data, "HW")
        entries.append({
            "name": s.name,
            "image": f"images/{s.name}.cldf",
            "gt": f"gt/{s.name}.cldf",
            "cam": f"cam/{s.name}.cldf",
            "grad": f"grad/{s.name}.cldf",
        })
    index = {"samples": entries, "config": config or {}}
    (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index
