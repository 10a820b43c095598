"""Glue between the stages: config, per-image feature/seed computation, full runs."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cluster import infer_mask
from .decoder import TrainConfig, train_decoder
from .diffusion import DEFAULT_TIMESTEPS, NoiseSchedule, ToyFeatureProvider, ToyProviderConfig, extract_features
from .fusion import BACKGROUND_CAP, binarize, select_seeds
from .metrics import dice, evaluate
from .synth import SynthConfig, _coerce

DESK_EPOCHS = 20
REFERENCE_AREA = 256 * 256


def area_scaled_cap(height: int, width: int, cap: int = BACKGROUND_CAP) -> int:
    return max(1, int(round(cap * height * width / REFERENCE_AREA)))


# seed modes: which saliency maps feed the contrastive seeds
FUSED, CAM_ONLY, MG_ONLY = "fused", "cam", "mg"


@dataclass
class FeatureConfig:
    timesteps: tuple = DEFAULT_TIMESTEPS
    schedule_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    upsample: str = "bilinear"
    toy: ToyProviderConfig = None

    def __post_init__(self):
        self.timesteps = tuple(int(t) for t in self.timesteps)
        self.toy = _coerce(ToyProviderConfig, self.toy)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.schedule_steps, self.beta_start, self.beta_end)


@dataclass
class KMeansConfig:
    restarts: int = 10
    max_iter: int = 100
    tol: float = 1e-6


@dataclass
class PipelineConfig:
    seed: int = 0
    seed_mode: str = FUSED
    background_per_batch: bool = False
    synth: SynthConfig = None
    features: FeatureConfig = None
    train: TrainConfig = None
    kmeans: KMeansConfig = None

    def __post_init__(self):
        self.synth = _coerce(SynthConfig, self.synth)
        self.features = _coerce(FeatureConfig, self.features)
        self.train = _coerce(TrainConfig, self.train)
        self.kmeans = _coerce(KMeansConfig, self.kmeans)
        if self.seed_mode not in (FUSED, CAM_ONLY, MG_ONLY):
            raise ValueError(f"unknown seed_mode {self.seed_mode!r}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def desk_scale(cls, seed: int = 0, **overrides) -> "PipelineConfig":
        """Settings for small synthetic runs.

        The background budget is scaled by image area (5000 pixels at
        256x256), and training runs 20 epochs because a few dozen images
        give only a handful of SGD steps per epoch.
        """
        cfg = cls(seed=seed, **overrides)
        scene = cfg.synth.scene
        cfg.train.background_cap = area_scaled_cap(scene.height, scene.width, BACKGROUND_CAP)
        cfg.train.epochs = DESK_EPOCHS
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def image_seed(seed: int, index: int, stream: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(index), int(stream)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def features_for(image: np.ndarray, cfg: PipelineConfig, index: int, provider=None):
    provider = provider or ToyFeatureProvider(cfg.features.toy)
    return extract_features(
        image,
        provider,
        cfg.features.timesteps,
        cfg.features.schedule(),
        seed=image_seed(cfg.seed, index, 1),
        upsample_mode=cfg.features.upsample,
    )


def seeds_for(cam, grad, cfg: PipelineConfig, index: int, mode: str | None = None):
    mode = mode or cfg.seed_mode
    t = cfg.train
    cam_mask = binarize(cam, t.cam_threshold)
    mg_mask = binarize(grad, t.mg_threshold)
    if mode == CAM_ONLY:
        mg_mask = cam_mask
    elif mode == MG_ONLY:
        cam_mask = mg_mask
    cap = None if cfg.background_per_batch else t.background_cap
    return select_seeds(cam_mask, mg_mask, cap, seed=image_seed(cfg.seed, index, 2), thresholds=(t.cam_threshold, t.mg_threshold))


@dataclass
class RunResult:
    masks: list
    report: dict
    baseline_report: dict | None = None
    train_losses: list = field(default_factory=list)
    net: object = None


def run_on_samples(samples, cfg: PipelineConfig, features=None, mode: str | None = None) -> RunResult:
    """Train one decoder on all samples and infer a mask for each of them."""
    feats = features if features is not None else [features_for(s.image, cfg, i) for i, s in enumerate(samples)]
    seeds = [seeds_for(s.cam, s.gradient, cfg, i, mode) for i, s in enumerate(samples)]
    if cfg.background_per_batch:
        from .fusion import cap_background_per_batch

        seeds = cap_background_per_batch(seeds, cfg.train.background_cap, image_seed(cfg.seed, 0, 4))
    result = train_decoder(list(zip(feats, seeds)), cfg.train)
    k = cfg.kmeans
    masks = []
    for i, (f, s) in enumerate(zip(feats, seeds)):
        emb = result.net.decode(f)
        masks.append(infer_mask(emb, s, image_seed(cfg.seed, i, 3), k.restarts, k.max_iter, k.tol))
    report = evaluate(list(zip(masks, [s.gt for s in samples])), [s.name for s in samples])
    return RunResult(masks, report, train_losses=result.epoch_losses, net=result.net)


def cam_baseline(samples, threshold: float = 0.5) -> dict:
    return evaluate([(binarize(s.cam, threshold), s.gt) for s in samples], [s.name for s in samples])


def seed_precision(samples, cfg: PipelineConfig, mode: str) -> float:
    vals = []
    for i, s in enumerate(samples):
        sel = seeds_for(s.cam, s.gradient, cfg, i, mode)
        if len(sel.foreground):
            vals.append(float(s.gt.reshape(-1)[sel.foreground].mean()))
    return float(np.mean(vals)) if vals else float("nan")
