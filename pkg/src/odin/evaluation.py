"""Object-discovery metrics (IoU, BO, ABO, OR) and video label propagation (J, F)."""

from __future__ import annotations

import warnings

import numpy as np


def iou(g: np.ndarray, m: np.ndarray) -> float:
    """Intersection over union of two binary masks; 0 (with a warning) if both are empty."""
    g = np.asarray(g, dtype=bool)
    m = np.asarray(m, dtype=bool)
    if g.shape != m.shape:
        raise ValueError(f"mask shapes differ: {g.shape} vs {m.shape}")
    union = np.logical_or(g, m).sum()
    if union == 0:
        warnings.warn("iou of two empty masks", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.logical_and(g, m).sum() / union)


def iou_matrix(gt: np.ndarray, proposals: np.ndarray) -> np.ndarray:
    """T×P IoU table between two stacks of binary masks."""
    g = gt.reshape(len(gt), -1).astype(np.float64)
    p = proposals.reshape(len(proposals), -1).astype(np.float64)
    inter = g @ p.T
    union = g.sum(1)[:, None] + p.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def best_overlaps(gt: np.ndarray, proposals: np.ndarray) -> np.ndarray:
    if len(proposals) == 0:
        return np.zeros(len(gt))
    return iou_matrix(gt, proposals).max(axis=1)


def filter_ground_truth(
    masks: np.ndarray, class_ids: list[int], max_masks: int = 16, min_area_px: float = 100.0
) -> tuple[np.ndarray, list[int]]:
    """Drop masks below the area threshold (given at 224×224 and rescaled), keep the largest ``max_masks``."""
    masks = np.asarray(masks, dtype=bool)
    if len(masks) == 0:
        return masks, []
    H, W = masks.shape[1:]
    threshold = min_area_px * (H * W) / (224.0 * 224.0)
    areas = masks.reshape(len(masks), -1).sum(1)
    keep = [i for i in np.argsort(-areas, kind="stable") if areas[i] >= threshold][:max_masks]
    keep.sort()
    return masks[keep], [class_ids[i] for i in keep]


def merge_by_class(masks: np.ndarray, class_ids: list[int]) -> np.ndarray:
    classes = sorted(set(class_ids))
    ids = np.asarray(class_ids)
    return np.array([masks[ids == c].any(axis=0) for c in classes], dtype=bool).reshape(len(classes), *masks.shape[1:])


def discovery_metrics(
    gt_masks: np.ndarray,
    class_ids: list[int],
    proposals: np.ndarray,
    filter_masks: bool = False,
    max_masks: int = 16,
    min_area_px: float = 100.0,
) -> dict | None:
    """ABO over instances and merged classes, and object recovery (BO strictly > 0.5).

    Returns None when filtering leaves no ground truth.
    """
    gt_masks = np.asarray(gt_masks, dtype=bool)
    if filter_masks:
        gt_masks, class_ids = filter_ground_truth(gt_masks, class_ids, max_masks, min_area_px)
    if len(gt_masks) == 0:
        return None
    bo = best_overlaps(gt_masks, proposals)
    bo_c = best_overlaps(merge_by_class(gt_masks, class_ids), proposals)
    return {
        "abo_i": float(bo.mean()),
        "abo_c": float(bo_c.mean()),
        "or": float((bo > 0.5).mean()),
        "num_gt": int(len(gt_masks)),
    }


# -- video ------------------------------------------------------------------------


def _normalize(f: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    return np.divide(f, norm, out=np.zeros_like(f), where=norm > 0)


EXACT_MATCH_TOL = 1e-9


def propagate_labels(
    video_features: list[np.ndarray], first_frame_labels: np.ndarray, radius: int = 4, top_n: int = 5
) -> list[np.ndarray]:
    """Carry labels frame to frame by nearest-neighbour feature matching.

    Each cell of frame t takes the similarity-weighted vote of the ``top_n``
    most cosine-similar cells of frame t-1 within ``radius`` cells
    (Chebyshev distance). A negative radius means the whole grid. An exact
    feature match is decisive: the spatially closest one supplies the label,
    so a static video keeps its labels whatever the features.
    """
    h, w = first_frame_labels.shape
    for f in video_features:
        if f.shape[:2] != (h, w):
            raise ValueError(f"feature grid {f.shape[:2]} does not match labels {(h, w)}")
    yy, xx = np.divmod(np.arange(h * w), w)
    dist = np.maximum(np.abs(yy[:, None] - yy[None, :]), np.abs(xx[:, None] - xx[None, :]))
    if radius >= 0:
        near = dist <= radius
    else:
        near = np.ones((h * w, h * w), dtype=bool)
    n_labels = int(first_frame_labels.max()) + 1
    out = [np.asarray(first_frame_labels).copy()]
    prev_feat = _normalize(video_features[0].reshape(h * w, -1))
    for f in video_features[1:]:
        cur = _normalize(f.reshape(h * w, -1))
        prev_labels = out[-1].reshape(-1)
        sim = np.where(near, cur @ prev_feat.T, -np.inf)
        n = min(top_n, h * w)
        top = np.argsort(-sim, axis=1, kind="stable")[:, :n]
        top_sim = np.take_along_axis(sim, top, axis=1)
        weights = np.where(np.isfinite(top_sim), np.maximum(top_sim, 0.0), 0.0)
        # all-zero weights: fall back to the single best match
        fallback = weights.sum(1) == 0
        weights[fallback, 0] = 1.0
        votes = np.zeros((h * w, n_labels))
        np.add.at(votes, (np.repeat(np.arange(h * w), n), prev_labels[top].reshape(-1)), weights.reshape(-1))
        labels = votes.argmax(1)
        exact = sim >= 1.0 - EXACT_MATCH_TOL
        has_exact = exact.any(1)
        closest = np.where(exact, dist, np.iinfo(np.int64).max).argmin(1)
        labels[has_exact] = prev_labels[closest[has_exact]]
        out.append(labels.reshape(h, w))
        prev_feat = cur
    return out


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask cells with at least one 4-neighbour outside the mask (grid edges do not count)."""
    m = np.asarray(mask, dtype=bool)
    edge = np.zeros_like(m)
    edge[1:] |= m[1:] != m[:-1]
    edge[:-1] |= m[:-1] != m[1:]
    edge[:, 1:] |= m[:, 1:] != m[:, :-1]
    edge[:, :-1] |= m[:, :-1] != m[:, 1:]
    return edge & m


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    out = mask.copy()
    h, w = mask.shape
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            src = mask[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
            out[max(0, dy) : h - max(0, -dy), max(0, dx) : w - max(0, -dx)] |= src
    return out


def boundary_f(pred: np.ndarray, gt: np.ndarray, tolerance: int = 1) -> float:
    """Boundary F-measure with a Chebyshev matching tolerance in cells."""
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    precision = (bp & _dilate(bg, tolerance)).sum() / n_p
    recall = (bg & _dilate(bp, tolerance)).sum() / n_g
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def video_metrics(predicted: list[np.ndarray], ground_truth: list[np.ndarray], tolerance: int = 1) -> dict:
    """Mean region IoU (J) and boundary F over objects and frames 1..T-1.

    Frame 0 is the given annotation and is not scored; an object absent from
    a ground-truth frame is skipped for that frame.
    """
    if len(predicted) != len(ground_truth):
        raise ValueError("frame counts differ")
    objects = sorted(int(v) for v in np.unique(ground_truth[0]) if v != 0)
    js, fs = [], []
    for t in range(1, len(ground_truth)):
        p, g = np.asarray(predicted[t]), np.asarray(ground_truth[t])
        if p.shape != g.shape:
            raise ValueError(f"frame {t}: shapes differ {p.shape} vs {g.shape}")
        for obj in objects:
            gm = g == obj
            if not gm.any():
                continue
            pm = p == obj
            union = (gm | pm).sum()
            js.append(float((gm & pm).sum() / union))
            fs.append(boundary_f(pm, gm, tolerance))
    j = float(np.mean(js)) if js else 0.0
    f = float(np.mean(fs)) if fs else 0.0
    return {"J": j, "F": f, "JF": (j + f) / 2}
