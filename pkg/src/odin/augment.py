"""Random views of an image, the spanning view, and label warping between views.

Crops are integer rectangles in source-pixel coordinates. Label warping maps
every target cell centre to the source pixel that contains it and then to the
spanning-view cell containing that pixel's centre, so two views that see the
same source pixel always read the same label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])
JITTER_OPS = ("brightness", "contrast", "saturation", "hue")


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class ViewGeometry:
    x: int
    y: int
    w: int
    h: int
    hflip: bool = False
    out_size: tuple[int, int] = (32, 32)  # (rows, cols)

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise GeometryError(f"crop extents must be >= 1, got {self.w}x{self.h}")

    @property
    def rect(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)

    def within(self, height: int, width: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height

    def contains(self, other: "ViewGeometry") -> bool:
        return (
            self.x <= other.x
            and self.y <= other.y
            and other.x + other.w <= self.x + self.w
            and other.y + other.h <= self.y + self.h
        )


@dataclass(frozen=True)
class DistributionParams:
    blur_prob: float
    solarize_prob: float
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    gray_prob: float = 0.2


@dataclass(frozen=True)
class AugmentConfig:
    view_size: int = 32
    discovery_scale: float = 2.0  # spanning-view side relative to view_size
    min_area: float = 0.08
    max_area: float = 1.0
    min_ratio: float = 3 / 4
    max_ratio: float = 4 / 3
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    blur_kernel: int = 23
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    t1: DistributionParams = field(default_factory=lambda: DistributionParams(blur_prob=1.0, solarize_prob=0.0))
    t2: DistributionParams = field(default_factory=lambda: DistributionParams(blur_prob=0.1, solarize_prob=0.2))

    @property
    def discovery_size(self) -> int:
        return int(round(self.view_size * self.discovery_scale))


@dataclass(frozen=True)
class AugmentationSample:
    geometry: ViewGeometry
    jitter: dict[str, float] | None = None
    jitter_order: tuple[str, ...] = JITTER_OPS
    grayscale: bool = False
    blur_sigma: float | None = None
    solarize: bool = False


def sample_crop(
    rng: np.random.Generator, height: int, width: int, cfg: AugmentConfig
) -> tuple[int, int, int, int]:
    """Area uniform in [min_area, max_area]·A, aspect ratio log-uniform.

    The ratio range is narrowed to the ratios for which a crop of the drawn
    area fits, so large areas are not under-sampled by rejection.
    """
    area = height * width
    for _ in range(100):
        target = rng.uniform(cfg.min_area, cfg.max_area) * area
        lo = max(cfg.min_ratio, target / height**2)
        hi = min(cfg.max_ratio, width**2 / target)
        if lo > hi:
            continue
        ratio = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            return x, y, w, h
    # centre-crop fallback
    side = min(height, width)
    return (width - side) // 2, (height - side) // 2, side, side


def sample_augmentation(
    rng: np.random.Generator, dist_id: str, config: AugmentConfig, image_size: tuple[int, int]
) -> AugmentationSample:
    if dist_id not in ("T1", "T2"):
        raise ValueError(f"dist_id must be T1 or T2, got {dist_id!r}")
    dist = config.t1 if dist_id == "T1" else config.t2
    height, width = image_size
    x, y, w, h = sample_crop(rng, height, width, config)
    hflip = bool(rng.random() < dist.flip_prob)
    geometry = ViewGeometry(x, y, w, h, hflip, (config.view_size, config.view_size))
    jitter = None
    order = JITTER_OPS
    if rng.random() < dist.jitter_prob:
        maxima = (config.brightness, config.contrast, config.saturation, config.hue)
        jitter = {op: float(rng.uniform(-m, m)) for op, m in zip(JITTER_OPS, maxima)}
        order = tuple(JITTER_OPS[i] for i in rng.permutation(4))
    grayscale = bool(rng.random() < dist.gray_prob)
    blur_sigma = float(rng.uniform(*config.blur_sigma)) if rng.random() < dist.blur_prob else None
    solarize = bool(rng.random() < dist.solarize_prob)
    return AugmentationSample(geometry, jitter, order, grayscale, blur_sigma, solarize)


# -- pixel operations ------------------------------------------------------------


def crop_resize(image: np.ndarray, geometry: ViewGeometry) -> np.ndarray:
    """Bilinear resample of the crop rectangle to ``geometry.out_size`` (no flip)."""
    rows, cols = geometry.out_size
    H, W = image.shape[:2]
    sy = geometry.y + (np.arange(rows) + 0.5) * geometry.h / rows - 0.5
    sx = geometry.x + (np.arange(cols) + 0.5) * geometry.w / cols - 0.5
    sy = np.clip(sy, 0, H - 1)
    sx = np.clip(sx, 0, W - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (sy - y0)[:, None, None]
    fx = (sx - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bottom = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def to_gray(image: np.ndarray) -> np.ndarray:
    return image @ GRAY_WEIGHTS


def adjust_brightness(image: np.ndarray, u: float) -> np.ndarray:
    return np.clip(image * (1 + u), 0, 1)


def adjust_contrast(image: np.ndarray, u: float) -> np.ndarray:
    mean = to_gray(image).mean()
    return np.clip(mean + (image - mean) * (1 + u), 0, 1)


def adjust_saturation(image: np.ndarray, u: float) -> np.ndarray:
    gray = to_gray(image)[..., None]
    return np.clip(gray + (image - gray) * (1 + u), 0, 1)


def adjust_hue(image: np.ndarray, u: float) -> np.ndarray:
    """Rotate colours about the gray axis by ``u * 2π`` radians."""
    theta = u * 2 * np.pi
    c, s = math.cos(theta), math.sin(theta)
    k = 1 / math.sqrt(3)
    axis = np.array([k, k, k])
    cross = np.array([[0, -k, k], [k, 0, -k], [-k, k, 0]])
    rot = c * np.eye(3) + s * cross + (1 - c) * np.outer(axis, axis)
    return np.clip(image @ rot.T, 0, 1)


_JITTER_FNS = {
    "brightness": adjust_brightness,
    "contrast": adjust_contrast,
    "saturation": adjust_saturation,
    "hue": adjust_hue,
}


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    r = np.arange(size) - size // 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float, size: int = 23) -> np.ndarray:
    """Separable blur with a ``size``×``size`` kernel, reflect-padded."""
    k = gaussian_kernel(sigma, size)
    r = size // 2
    out = image
    for axis in (0, 1):
        pad = [(0, 0)] * image.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="symmetric")
        win = np.lib.stride_tricks.sliding_window_view(padded, size, axis=axis)
        out = win @ k
    return out


def solarize(image: np.ndarray) -> np.ndarray:
    return np.where(image < 0.5, image, 1.0 - image)


def apply_augmentation(image: np.ndarray, sample: AugmentationSample, blur_kernel: int = 23) -> np.ndarray:
    """Crop+resize, flip, colour jitter, grayscale, blur, solarize; clipped to [0, 1]."""
    out = crop_resize(image, sample.geometry)
    if sample.geometry.hflip:
        out = out[:, ::-1]
    if sample.jitter is not None:
        for op in sample.jitter_order:
            out = _JITTER_FNS[op](out, sample.jitter[op])
    if sample.grayscale:
        out = np.repeat(to_gray(out)[..., None], 3, axis=-1)
    if sample.blur_sigma is not None:
        out = gaussian_blur(out, sample.blur_sigma, blur_kernel)
    if sample.solarize:
        out = solarize(out)
    return np.clip(out, 0.0, 1.0)


# -- geometry --------------------------------------------------------------------


def spanning_view(g1: ViewGeometry, g2: ViewGeometry, out_size: tuple[int, int]) -> ViewGeometry:
    """Smallest rectangle containing both crops."""
    x0, y0 = min(g1.x, g2.x), min(g1.y, g2.y)
    x1 = max(g1.x + g1.w, g2.x + g2.w)
    y1 = max(g1.y + g1.h, g2.y + g2.h)
    return ViewGeometry(x0, y0, x1 - x0, y1 - y0, False, tuple(out_size))


def cell_source_pixels(geometry: ViewGeometry, grid: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Source pixel (row, col) containing each cell centre of a view's ``grid``.

    Cell centres sit at (2i+1)/(2n) of the crop; integer arithmetic keeps
    centres that fall exactly on a pixel edge on the same side every time.
    """
    rows, cols = grid
    i = np.arange(rows)
    j = np.arange(cols)
    if geometry.hflip:
        j = j[::-1]
    py = geometry.y + ((2 * i + 1) * geometry.h) // (2 * rows)
    px = geometry.x + ((2 * j + 1) * geometry.w) // (2 * cols)
    return py, px


def source_pixel_cells(geometry: ViewGeometry, grid: tuple[int, int], py, px) -> tuple[np.ndarray, np.ndarray]:
    """Grid cell of ``geometry`` containing the centre of source pixels (py, px)."""
    rows, cols = grid
    dy = np.asarray(py) - geometry.y
    dx = np.asarray(px) - geometry.x
    if geometry.hflip:
        dx = geometry.w - 1 - dx
    cy = ((2 * dy + 1) * rows) // (2 * geometry.h)
    cx = ((2 * dx + 1) * cols) // (2 * geometry.w)
    return np.clip(cy, 0, rows - 1), np.clip(cx, 0, cols - 1)


def warp_labels(
    labels: np.ndarray, src: ViewGeometry, dst: ViewGeometry, out_grid: tuple[int, int]
) -> np.ndarray:
    """Nearest-neighbour label map on ``dst``'s ``out_grid`` read from ``labels`` on ``src``."""
    if not src.contains(dst):
        raise GeometryError(f"target crop {dst.rect} not contained in source crop {src.rect}")
    py, px = cell_source_pixels(dst, out_grid)
    cy, cx = source_pixel_cells(src, labels.shape, py, px)
    return labels[np.ix_(cy, cx)]


def warp_mask(
    labels: np.ndarray, src: ViewGeometry, dst: ViewGeometry, out_grid: tuple[int, int], num_segments: int
) -> np.ndarray:
    """Per-segment binary masks (``num_segments``×h×w) on the target grid.

    Segments absent from the target view come back all-zero; callers
    discard them.
    """
    warped = warp_labels(labels, src, dst, out_grid)
    return warped[None] == np.arange(num_segments)[:, None, None]
