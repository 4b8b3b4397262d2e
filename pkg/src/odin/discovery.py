"""K-means segmentation of feature maps, proposal pyramids and a segmentation cache."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable

import numpy as np

from .model import ModelConfig, Params, features

DEFAULT_PYRAMID = (1, 2, 4, 8, 16, 32, 64, 128)


@dataclass
class KMeansResult:
    labels: np.ndarray  # grid-shaped integer labels in [0, K)
    centroids: np.ndarray  # K×D
    inertia: float
    iterations: int
    history: list[float] = field(default_factory=list)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(free[rng.integers(len(free))])
        chosen.append(idx)
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(1))
    return x[chosen].copy()


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iters: int, tol: float) -> KMeansResult:
    k = len(centroids)
    d = _sq_dists(x, centroids)
    labels = d.argmin(1)  # ties go to the lowest index
    history = [float(d[np.arange(len(x)), labels].sum())]
    it = 0
    for it in range(1, max_iters + 1):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        new = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], centroids)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            own = ((x - new[labels]) ** 2).sum(1)
            for e in empty:
                far = int(own.argmax())
                new[e] = x[far]
                own[far] = -1.0
        shift = float(np.sqrt(((new - centroids) ** 2).sum(1)).max())
        centroids = new
        d = _sq_dists(x, centroids)
        new_labels = d.argmin(1)
        history.append(float(d[np.arange(len(x)), new_labels].sum()))
        converged = shift < tol and np.array_equal(new_labels, labels)
        labels = new_labels
        if converged:
            break
    inertia = float(((x - centroids[labels]) ** 2).sum())
    return KMeansResult(labels, centroids, inertia, it, history)


def kmeans(
    features: np.ndarray,
    K: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
    n_init: int = 1,
    normalize: bool = True,
) -> KMeansResult:
    """k-means++ seeded Lloyd iterations on the vectors of ``features``.

    ``features`` is ``...×D``; the returned labels have the leading shape.
    Vectors are L2-normalised first unless ``normalize`` is False. With
    ``n_init > 1`` the lowest-inertia restart wins.
    """
    features = np.asarray(features, dtype=np.float64)
    grid = features.shape[:-1]
    D = features.shape[-1]
    if D == 0:
        raise ValueError("feature dimension must be positive")
    x = features.reshape(-1, D)
    if K < 1 or K > len(x):
        raise ValueError(f"K={K} must lie in [1, {len(x)}]")
    if normalize:
        x = _normalize_rows(x)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        result = _lloyd(x, _plusplus(x, K, rng), max_iters, tol)
        if best is None or result.inertia < best.inertia:
            best = result
    best.labels = best.labels.reshape(grid)
    return best


def discover(
    image: np.ndarray,
    params: Params,
    K: int,
    cfg: ModelConfig,
    source: str = "projection",
    seed: int = 0,
) -> np.ndarray:
    """Forward-only encoding of one view followed by k-means; returns grid labels."""
    feats = features(params, image[None], cfg, source)[0]
    return kmeans(feats, K, seed=seed).labels


def upsample_labels(labels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of a label grid to ``size`` (rows, cols)."""
    h, w = labels.shape
    rows, cols = size
    iy = np.minimum(((np.arange(rows) + 0.5) * h / rows).astype(int), h - 1)
    ix = np.minimum(((np.arange(cols) + 0.5) * w / cols).astype(int), w - 1)
    return labels[np.ix_(iy, ix)]


def proposal_pyramid(
    features: np.ndarray, Ks=DEFAULT_PYRAMID, image_size: tuple[int, int] | None = None, seed: int = 0
) -> np.ndarray:
    """One k-means per K on the same features; returns ΣK binary masks (P×rows×cols)."""
    Ks = list(Ks)
    if not Ks:
        raise ValueError("Ks must be non-empty")
    size = image_size or features.shape[:2]
    masks = []
    for K in Ks:
        labels = upsample_labels(kmeans(features, K, seed=seed).labels, size)
        masks.append(labels[None] == np.arange(K)[:, None, None])
    return np.concatenate(masks, axis=0)


class SegmentationCache:
    """Label maps keyed by image id, valid while ``stamp`` is unchanged.

    Not thread-safe; the trainer uses it from a single thread.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.stamp = 0
        self.entries: dict[Hashable, np.ndarray] = {}
        self.computed = 0

    def bump(self) -> None:
        self.stamp += 1
        self.entries.clear()

    def get_or_compute(self, image_id: Hashable, compute: Callable[[], np.ndarray], stamp: int | None = None):
        if stamp is not None and stamp != self.stamp:
            self.entries.clear()
            self.stamp = stamp
        if self.enabled and image_id in self.entries:
            return self.entries[image_id]
        labels = compute()
        self.computed += 1
        if self.enabled:
            self.entries[image_id] = labels
        return labels


def cache_get_or_compute(
    cache: SegmentationCache,
    image_id: Hashable,
    image: np.ndarray,
    params: Params,
    K: int,
    cfg: ModelConfig,
    source: str = "projection",
    seed: int = 0,
) -> np.ndarray:
    return cache.get_or_compute(image_id, lambda: discover(image, params, K, cfg, source, seed))
