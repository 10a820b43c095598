"""Seed-pixel selection from a CAM and a mean-gradient map."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .saliency import ActivationMap

BACKGROUND_CAP = 5000

UNUSED, FOREGROUND, BACKGROUND = 0, 1, 2


@dataclass
class SeedSelection:
    """Foreground/background seeds as flat (row-major) pixel indices."""

    foreground: np.ndarray
    background: np.ndarray
    shape: tuple
    thresholds: tuple = (0.5, 0.5)
    skip: bool = False

    def __post_init__(self):
        self.foreground = np.asarray(self.foreground, dtype=np.int64)
        self.background = np.asarray(self.background, dtype=np.int64)
        self.shape = tuple(int(s) for s in self.shape)

    def coords(self, which: str = "foreground") -> set:
        idx = getattr(self, which)
        return {(int(i) // self.shape[1], int(i) % self.shape[1]) for i in idx}

    def to_label_map(self) -> np.ndarray:
        """u8 map: 0 unused, 1 foreground, 2 background."""
        out = np.zeros(self.shape[0] * self.shape[1], dtype=np.uint8)
        out[self.foreground] = FOREGROUND
        out[self.background] = BACKGROUND
        return out.reshape(self.shape)

    @classmethod
    def from_label_map(cls, labels: np.ndarray, thresholds=(0.5, 0.5)) -> "SeedSelection":
        flat = np.asarray(labels).reshape(-1)
        fg = np.flatnonzero(flat == FOREGROUND)
        bg = np.flatnonzero(flat == BACKGROUND)
        return cls(fg, bg, labels.shape, thresholds, skip=len(fg) == 0)


def binarize(amap, threshold: float = 0.5) -> np.ndarray:
    data = amap.data if isinstance(amap, ActivationMap) else np.asarray(amap)
    return data >= threshold


def select_seeds(
    cam_mask: np.ndarray,
    mg_mask: np.ndarray,
    cap: int | None = BACKGROUND_CAP,
    seed: int = 0,
    foreground_cap: int | None = None,
    thresholds: tuple = (0.5, 0.5),
) -> SeedSelection:
    """Foreground = both maps active; background = a sample of pixels where neither is."""
    cam_mask = np.asarray(cam_mask, dtype=bool)
    mg_mask = np.asarray(mg_mask, dtype=bool)
    if cam_mask.shape != mg_mask.shape:
        raise ValueError(f"mask shapes differ: {cam_mask.shape} vs {mg_mask.shape}")
    rng = np.random.default_rng(seed)
    fg = np.flatnonzero(cam_mask & mg_mask)
    pool = np.flatnonzero(~(cam_mask | mg_mask))
    bg = _sample(pool, cap, rng)
    if foreground_cap is not None:
        fg = _sample(fg, foreground_cap, rng)
    return SeedSelection(fg, bg, cam_mask.shape, thresholds, skip=len(fg) == 0)


def _sample(pool: np.ndarray, cap: int | None, rng: np.random.Generator) -> np.ndarray:
    if cap is None or len(pool) <= cap:
        return pool
    return np.sort(rng.choice(pool, size=cap, replace=False))


def cap_background_per_batch(selections: list, cap: int = BACKGROUND_CAP, seed: int = 0) -> list:
    """Alternative reading of the background budget: ``cap`` pixels shared by a whole batch."""
    rng = np.random.default_rng(seed)
    owners = np.concatenate([np.full(len(s.background), k) for k, s in enumerate(selections)] or [np.zeros(0)])
    if len(owners) <= cap:
        return list(selections)
    keep = np.sort(rng.choice(len(owners), size=cap, replace=False))
    out = []
    offset = 0
    for k, s in enumerate(selections):
        n = len(s.background)
        mine = keep[(keep >= offset) & (keep < offset + n)] - offset
        out.append(SeedSelection(s.foreground, s.background[mine], s.shape, s.thresholds, s.skip))
        offset += n
    return out
