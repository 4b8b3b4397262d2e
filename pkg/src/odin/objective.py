"""Mask pooling, cross-view similarity and the contrastive detection loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, backbone, predict, project


class InvalidSegment(ValueError):
    """A mask had no cells; the segment must be discarded."""


class DegenerateBatch(ValueError):
    """No segment is valid in both views anywhere in the batch."""


def mask_pool(feature_map, mask: np.ndarray) -> ad.Tensor:
    """Mean of ``feature_map`` (h×w×D) over the cells where ``mask`` is set."""
    mask = np.asarray(mask, dtype=np.float64)
    total = mask.sum()
    if total == 0:
        raise InvalidSegment("empty mask")
    fm = ad.as_tensor(feature_map)
    h, w, d = fm.shape
    if mask.shape != (h, w):
        raise ad.ShapeError(f"mask {mask.shape} does not match feature grid {(h, w)}")
    weights = (mask / total).reshape(1, h * w)
    return ad.reshape(ad.matmul(weights, ad.reshape(fm, (h * w, d))), (d,))


def pool_masks(feature_maps, masks: np.ndarray) -> tuple[ad.Tensor, np.ndarray]:
    """Batched pooling: N×h×w×D maps and N×K×h×w masks -> (N×K×D, N×K validity)."""
    fm = ad.as_tensor(feature_maps)
    n, h, w, d = fm.shape
    masks = np.asarray(masks, dtype=np.float64)
    if masks.shape[0] != n or masks.shape[2:] != (h, w):
        raise ad.ShapeError(f"masks {masks.shape} do not match feature maps {fm.shape}")
    counts = masks.sum(axis=(2, 3))
    valid = counts > 0
    weights = masks.reshape(n, -1, h * w) / np.where(valid, counts, 1.0)[..., None]
    return ad.matmul(weights, ad.reshape(fm, (n, h * w, d))), valid


def similarity(prediction, target, alpha: float) -> float:
    """Cosine similarity scaled by ``1 / alpha``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    p = ad.l2_normalize(ad.as_tensor(prediction)).data
    t = ad.l2_normalize(ad.as_tensor(target)).data
    return float(p @ t) / alpha


@dataclass
class PooledFeatures:
    """Per (image, segment) pooled vectors for one view.

    ``prediction`` is None on the target path.
    """

    hidden: ad.Tensor
    projection: ad.Tensor
    prediction: ad.Tensor | None
    valid: np.ndarray


def forward_view(images, params, masks: np.ndarray, cfg: ModelConfig, online: bool = True) -> PooledFeatures:
    """Encode a batch of views, pool over masks and apply the heads.

    Pass leaves as ``params`` on the online path; plain arrays (or constant
    tensors) keep the target path out of the graph.
    """
    if not online:
        params = {k: ad.Tensor(v.data if isinstance(v, ad.Tensor) else v) for k, v in params.items()}
    h = backbone(params, images, cfg)
    if masks.shape[2:] != h.shape[1:3]:
        raise ad.ShapeError(f"mask grid {masks.shape[2:]} does not match feature grid {h.shape[1:3]}")
    pooled, valid = pool_masks(h, masks)
    z = project(params, pooled)
    q = predict(params, z) if online else None
    return PooledFeatures(pooled, z, q, valid)


def contrastive_loss(
    predictions: tuple[ad.Tensor, ad.Tensor],
    targets: tuple[np.ndarray, np.ndarray],
    valid: np.ndarray,
    alpha: float = 0.1,
) -> ad.Tensor:
    """Symmetric contrastive detection loss over a batch.

    ``predictions[l]`` are online predictions (N×K×D) for view ``l``;
    ``targets[l]`` are target projections (N×K×D). ``valid`` (N×K) marks
    segments present in both views; only those act as anchors, positives
    or negatives. Each image's summed two-direction loss is divided by its
    number of valid segments and the result is averaged over images.
    """
    valid = np.asarray(valid, dtype=bool)
    n, k = valid.shape
    rows, cols = np.nonzero(valid)
    if rows.size == 0:
        raise DegenerateBatch("no segment is valid in both views")
    per_image = valid.sum(axis=1)
    images_used = int((per_image > 0).sum())
    weight = 1.0 / (per_image[rows] * images_used)
    diag = (np.arange(rows.size), np.arange(rows.size))
    total = None
    for a, b in ((0, 1), (1, 0)):
        p = ad.l2_normalize(ad.take(predictions[a], (rows, cols)), axis=-1)
        t = ad.l2_normalize(ad.as_tensor(np.asarray(getattr(targets[b], "data", targets[b]))[rows, cols]), axis=-1)
        logits = ad.matmul(p, ad.Tensor(t.data.T)) * (1.0 / alpha)
        per_anchor = ad.logsumexp(logits, axis=1) - ad.take(logits, diag)
        term = ad.sum(per_anchor * weight)
        total = term if total is None else total + term
    return total
