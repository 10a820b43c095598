"""K-means over pixel embeddings and the cluster-to-mask rule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import PixelEmbeddingMap
from .fusion import SeedSelection


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective: float
    history: list = field(default_factory=list)  # objective after every assignment step of the best restart


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # explicit differences: no BLAS, so results do not depend on thread count
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = [points[rng.integers(n)]]
    closest = _sq_dists(points, centroids[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        centroids.append(points[idx])
        closest = np.minimum(closest, _sq_dists(points, points[idx][None])[:, 0])
    return np.array(centroids)


def _lloyd(points, centroids, max_iter, tol):
    history = []
    prev = np.inf
    for _ in range(max_iter):
        d = _sq_dists(points, centroids)
        assign = d.argmin(axis=1)
        obj = float(d[np.arange(len(points)), assign].sum())
        if obj > prev * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means objective increased: {prev} -> {obj}")
        history.append(obj)
        if prev - obj < tol:
            break
        prev = obj
        new = centroids.copy()
        for c in range(len(centroids)):
            members = assign == c
            if members.any():
                new[c] = points[members].mean(axis=0)
            else:
                # empty cluster: move it onto the point worst served by its centroid
                far = int(d[np.arange(len(points)), assign].argmax())
                new[c] = points[far]
                assign[far] = c
        centroids = new
    d = _sq_dists(points, centroids)
    assign = d.argmin(axis=1)
    obj = float(d[np.arange(len(points)), assign].sum())
    history.append(obj)
    return assign, centroids, obj, history


def kmeans(
    points: np.ndarray,
    k: int = 2,
    seed: int = 0,
    restarts: int = 10,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; the best of ``restarts`` runs wins."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if len(points) < k:
        raise ValueError(f"need at least k={k} points, got {len(points)}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        init = _plusplus(points, k, rng)
        assign, cents, obj, hist = _lloyd(points, init, max_iter, tol)
        if best is None or obj < best.objective:
            best = KMeansResult(assign, cents, obj, hist)
    return best


def infer_mask(embeddings, seeds: SeedSelection, seed: int = 0, restarts: int = 10, max_iter: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Binary mask: the 2-means cluster holding most seed-foreground pixels is foreground."""
    data = embeddings.data if isinstance(embeddings, PixelEmbeddingMap) else np.asarray(embeddings)
    h, w = data.shape[:2]
    if len(seeds.foreground) == 0:
        return np.zeros((h, w), dtype=np.uint8)
    result = kmeans(data.reshape(h * w, -1), 2, seed, restarts, max_iter, tol)
    votes = np.bincount(result.assignments[seeds.foreground], minlength=2)
    sizes = np.bincount(result.assignments, minlength=2)
    if votes[0] != votes[1]:
        fg = int(votes.argmax())
    else:
        fg = int(sizes.argmin())
    return (result.assignments == fg).astype(np.uint8).reshape(h, w)
