"""End-to-end evaluation runs over datasets, for trained or baseline feature sources."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .augment import ViewGeometry, crop_resize
from .config import RunConfig
from .data import Scene, VideoScene
from .discovery import proposal_pyramid, upsample_labels
from .evaluation import discovery_metrics, propagate_labels, video_metrics
from .model import Params, features, init_params

FeatureFn = Callable[[np.ndarray], np.ndarray]


def model_features(params: Params, config: RunConfig, source: str | None = None) -> FeatureFn:
    """Image (H×W×3) -> dense feature map at the evaluation resolution."""
    source = source or config.eval.source
    res = config.eval.resolution

    def fn(image: np.ndarray) -> np.ndarray:
        H, W = image.shape[:2]
        view = crop_resize(image, ViewGeometry(0, 0, W, H, False, (res, res)))
        return features(params, view[None], config.model, source)[0]

    return fn


def random_params(config: RunConfig, seed: int = 0) -> Params:
    return init_params(config.model, np.random.default_rng([seed, 0x1417]))


def color_features(config: RunConfig) -> FeatureFn:
    """Raw pixel colours pooled onto the same grid as the model features."""
    res = config.eval.resolution
    rows, cols = config.model.grid((res, res))

    def fn(image: np.ndarray) -> np.ndarray:
        H, W = image.shape[:2]
        return crop_resize(image, ViewGeometry(0, 0, W, H, False, (rows, cols)))

    return fn


def downsample_labels(labels: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    return upsample_labels(labels, grid)


def evaluate_discovery(
    feature_fn: FeatureFn,
    scenes: list[Scene],
    config: RunConfig,
    ids: list[str] | None = None,
    proposals_override: Callable[[Scene], np.ndarray] | None = None,
) -> dict:
    """Proposal pyramid per image scored against instance/class ground truth."""
    ev = config.eval
    per_image, skipped = [], 0
    ids = ids or [f"{i:05d}" for i in range(len(scenes))]
    for sid, scene in zip(ids, scenes):
        if proposals_override is not None:
            proposals = proposals_override(scene)
        else:
            feats = feature_fn(scene.image)
            proposals = proposal_pyramid(feats, ev.Ks, scene.image.shape[:2], seed=0)
        m = discovery_metrics(
            scene.instance_masks, scene.class_ids, proposals, ev.filter_masks, ev.max_masks, ev.min_area_px
        )
        if m is None:
            skipped += 1
            continue
        per_image.append({"id": sid, **m})
    means = {k: float(np.mean([p[k] for p in per_image])) if per_image else 0.0 for k in ("abo_i", "abo_c", "or")}
    return {
        "means": means,
        "per_image": per_image,
        "skipped": skipped,
        "Ks": list(ev.Ks),
        "filter": {"enabled": ev.filter_masks, "max_masks": ev.max_masks, "min_area_px": ev.min_area_px},
    }


def evaluate_video(feature_fn: FeatureFn, videos: list[VideoScene], config: RunConfig, ids=None) -> dict:
    """Propagate frame-0 labels through per-frame features; score J/F on the feature grid."""
    ev = config.eval
    rows = []
    ids = ids or [f"{i:05d}" for i in range(len(videos))]
    for sid, video in zip(ids, videos):
        feats = [feature_fn(frame.image) for frame in video.frames]
        grid = feats[0].shape[:2]
        gt = [downsample_labels(frame.labels, grid) for frame in video.frames]
        pred = propagate_labels(feats, gt[0], ev.radius, ev.top_n)
        rows.append({"id": sid, **video_metrics(pred, gt, ev.boundary_tolerance)})
    means = {k: float(np.mean([r[k] for r in rows])) if rows else 0.0 for k in ("J", "F", "JF")}
    return {"means": means, "per_sequence": rows}
