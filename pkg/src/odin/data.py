"""Synthetic multi-object scenes and short videos with ground-truth masks.

Objects are textured disks, rectangles and triangles on a textured
background. The shape kind doubles as the semantic class, so instances of
the same kind can be merged for categorical scoring.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .netpbm import read_image, read_labelmap, write_image, write_labelmap

SHAPE_CLASSES = {"disk": 1, "rectangle": 2, "triangle": 3}
MAX_ATTEMPTS = 100


class GenerationError(RuntimeError):
    """Objects could not be placed without total occlusion."""


@dataclass(frozen=True)
class SceneConfig:
    H: int = 64
    W: int = 64
    min_objects: int = 2
    max_objects: int = 4
    shape_kinds: tuple[str, ...] = ("disk", "rectangle", "triangle")
    texture_level: float = 0.8
    min_size: float = 0.14  # object half-extent, fraction of min(H, W)
    max_size: float = 0.28
    min_visible: float = 0.3  # fraction of an object's area that must stay visible

    def validate(self) -> None:
        if self.H < 32 or self.W < 32:
            raise ValueError("H and W must be >= 32")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need max_objects >= min_objects >= 1")
        unknown = set(self.shape_kinds) - set(SHAPE_CLASSES)
        if unknown or not self.shape_kinds:
            raise ValueError(f"unknown shape kinds {sorted(unknown)}")


@dataclass(frozen=True)
class VideoConfig:
    frames: int = 6
    max_step_px: int = 2
    scene: SceneConfig = field(default_factory=SceneConfig)


@dataclass
class Scene:
    image: np.ndarray  # H×W×3 in [0, 1]
    instance_masks: np.ndarray  # T×H×W bool, pairwise disjoint
    class_ids: list[int]

    @property
    def labels(self) -> np.ndarray:
        """Label map: 0 for background, ``t + 1`` for instance ``t``."""
        out = np.zeros(self.image.shape[:2], dtype=np.int64)
        for t, m in enumerate(self.instance_masks):
            out[m] = t + 1
        return out


@dataclass
class VideoScene:
    frames: list[Scene]
    first_frame_labels: np.ndarray


@dataclass
class _Object:
    kind: str
    cy: float
    cx: float
    size: float
    aspect: float
    angle: float
    color: np.ndarray
    color2: np.ndarray
    freq: float
    stripe_angle: float
    checker: bool

    def shape_mask(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        dy, dx = yy - self.cy, xx - self.cx
        if self.kind == "disk":
            return dy * dy + dx * dx <= self.size**2
        if self.kind == "rectangle":
            c, s = np.cos(self.angle), np.sin(self.angle)
            u, v = c * dx + s * dy, -s * dx + c * dy
            return (np.abs(u) <= self.size) & (np.abs(v) <= self.size * self.aspect)
        # triangle: three half-planes around the centre
        inside = np.ones_like(dy, dtype=bool)
        for i in range(3):
            a = self.angle + 2 * np.pi * i / 3
            inside &= np.cos(a) * dx + np.sin(a) * dy <= self.size * 0.5
        return inside

    def texture(self, yy: np.ndarray, xx: np.ndarray, level: float) -> np.ndarray:
        dy, dx = yy - self.cy, xx - self.cx
        if self.checker:
            p = (np.floor(dx * self.freq) + np.floor(dy * self.freq)) % 2
        else:
            u = np.cos(self.stripe_angle) * dx + np.sin(self.stripe_angle) * dy
            p = (np.sin(u * self.freq * np.pi) > 0).astype(np.float64)
        mix = level * p[..., None]
        return (1 - mix) * self.color + mix * self.color2

    def extent(self) -> float:
        return self.size * max(1.0, self.aspect) * 1.5


def _random_object(rng: np.random.Generator, cfg: SceneConfig) -> _Object:
    side = min(cfg.H, cfg.W)
    size = rng.uniform(cfg.min_size, cfg.max_size) * side
    kind = cfg.shape_kinds[rng.integers(len(cfg.shape_kinds))]
    obj = _Object(
        kind=kind,
        cy=0.0,
        cx=0.0,
        size=size,
        aspect=rng.uniform(0.5, 1.0),
        angle=rng.uniform(0, 2 * np.pi),
        color=rng.uniform(0.05, 0.95, size=3),
        color2=rng.uniform(0.05, 0.95, size=3),
        freq=rng.uniform(0.12, 0.3),
        stripe_angle=rng.uniform(0, np.pi),
        checker=bool(rng.random() < 0.5),
    )
    margin = min(obj.extent(), side / 2 - 1)
    obj.cy = rng.uniform(margin, cfg.H - 1 - margin)
    obj.cx = rng.uniform(margin, cfg.W - 1 - margin)
    return obj


def _background(rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    yy, xx = np.mgrid[0 : cfg.H, 0 : cfg.W].astype(np.float64)
    base = rng.uniform(0.2, 0.8, size=3)
    gy, gx = rng.uniform(-0.3, 0.3, size=(2, 3))
    img = base + gy * (yy[..., None] / cfg.H - 0.5) + gx * (xx[..., None] / cfg.W - 0.5)
    img = img + rng.normal(0.0, 0.5 * cfg.texture_level * 0.2, size=img.shape)
    return img


def _render(background: np.ndarray, objects: list[_Object], cfg: SceneConfig) -> Scene:
    yy, xx = np.mgrid[0 : cfg.H, 0 : cfg.W].astype(np.float64)
    image = background.copy()
    full = [o.shape_mask(yy, xx) for o in objects]
    for o, m in zip(objects, full):
        image[m] = o.texture(yy, xx, cfg.texture_level)[m]
    visible = []
    covered = np.zeros((cfg.H, cfg.W), dtype=bool)
    for m in reversed(full):
        visible.append(m & ~covered)
        covered |= m
    visible.reverse()
    return Scene(
        image=np.clip(image, 0.0, 1.0),
        instance_masks=np.array(visible, dtype=bool).reshape(len(objects), cfg.H, cfg.W),
        class_ids=[SHAPE_CLASSES[o.kind] for o in objects],
    )


def _visible_enough(scene: Scene, objects: list[_Object], cfg: SceneConfig) -> bool:
    yy, xx = np.mgrid[0 : cfg.H, 0 : cfg.W].astype(np.float64)
    for o, vis in zip(objects, scene.instance_masks):
        area = o.shape_mask(yy, xx).sum()
        if vis.sum() < max(1, cfg.min_visible * area):
            return False
    return True


def generate_scene(seed: int, config: SceneConfig | None = None) -> Scene:
    """Deterministic scene from ``seed``; retries placements up to 100 times."""
    cfg = config or SceneConfig()
    cfg.validate()
    rng = np.random.default_rng([seed, 0x5CE7E])
    background = _background(rng, cfg)
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    for _ in range(MAX_ATTEMPTS):
        objects = [_random_object(rng, cfg) for _ in range(n)]
        scene = _render(background, objects, cfg)
        if _visible_enough(scene, objects, cfg):
            return scene
    raise GenerationError(f"could not place {n} objects after {MAX_ATTEMPTS} attempts")


def generate_video(seed: int, config: VideoConfig | None = None) -> VideoScene:
    """Objects translate by at most ``max_step_px`` per frame, bouncing off edges."""
    cfg = config or VideoConfig()
    scfg = cfg.scene
    scfg.validate()
    if cfg.frames < 2:
        raise ValueError("frames must be >= 2")
    rng = np.random.default_rng([seed, 0x71DE0])
    background = _background(rng, scfg)
    n = int(rng.integers(scfg.min_objects, scfg.max_objects + 1))
    step = int(cfg.max_step_px)
    for _ in range(MAX_ATTEMPTS):
        objects = [_random_object(rng, scfg) for _ in range(n)]
        velocity = rng.integers(-step, step + 1, size=(n, 2)) if step > 0 else np.zeros((n, 2), dtype=int)
        frames = []
        ok = True
        for _t in range(cfg.frames):
            scene = _render(background, objects, scfg)
            if not _visible_enough(scene, objects, scfg):
                ok = False
                break
            frames.append(scene)
            for o, v in zip(objects, velocity):
                r = o.extent()
                for axis, limit in ((0, scfg.H - 1), (1, scfg.W - 1)):
                    pos = o.cy if axis == 0 else o.cx
                    if not (min(r, limit / 2) <= pos + v[axis] <= limit - min(r, limit / 2)):
                        v[axis] = -v[axis]
                    if axis == 0:
                        o.cy += v[0]
                    else:
                        o.cx += v[1]
        if ok:
            return VideoScene(frames=frames, first_frame_labels=frames[0].labels)
    raise GenerationError(f"could not keep {n} objects visible after {MAX_ATTEMPTS} attempts")


# -- on-disk datasets -----------------------------------------------------------


def _digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _config_dict(cfg) -> dict:
    d = asdict(cfg)
    return json.loads(json.dumps(d))


def write_dataset(root: str | os.PathLike, n: int, seed: int, config: SceneConfig | None = None) -> str:
    """Write ``n`` scenes as ``img/<id>.ppm`` + ``mask/<id>.pgm`` + ``meta.json``; return a digest."""
    cfg = config or SceneConfig()
    root = Path(root)
    (root / "img").mkdir(parents=True, exist_ok=True)
    (root / "mask").mkdir(parents=True, exist_ok=True)
    classes = {}
    for i in range(n):
        scene = generate_scene(seed * 1_000_003 + i, cfg)
        sid = f"{i:05d}"
        write_image(root / "img" / f"{sid}.ppm", scene.image)
        write_labelmap(root / "mask" / f"{sid}.pgm", scene.labels)
        classes[sid] = scene.class_ids
    meta = {"kind": "scenes", "seed": seed, "n": n, "config": _config_dict(cfg), "classes": classes}
    (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
    return _digest(root)


def write_video_dataset(
    root: str | os.PathLike, n: int, seed: int, config: VideoConfig | None = None
) -> str:
    """Write ``n`` sequences as ``<seq>/frame_###.ppm`` + ``<seq>/mask_###.pgm``."""
    cfg = config or VideoConfig()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    classes = {}
    for i in range(n):
        video = generate_video(seed * 1_000_003 + i, cfg)
        sid = f"{i:05d}"
        seq = root / sid
        seq.mkdir(exist_ok=True)
        for t, frame in enumerate(video.frames):
            write_image(seq / f"frame_{t:03d}.ppm", frame.image)
            write_labelmap(seq / f"mask_{t:03d}.pgm", frame.labels)
        classes[sid] = video.frames[0].class_ids
    meta = {"kind": "videos", "seed": seed, "n": n, "config": _config_dict(cfg), "classes": classes}
    (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
    return _digest(root)


def _masks_from_labels(labels: np.ndarray, count: int) -> np.ndarray:
    return np.array([labels == t + 1 for t in range(count)], dtype=bool).reshape(count, *labels.shape)


def load_dataset(root: str | os.PathLike) -> tuple[list[str], list[Scene]]:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    if meta.get("kind") != "scenes":
        raise ValueError(f"{root} is not a scene dataset")
    ids = sorted(meta["classes"])
    scenes = []
    for sid in ids:
        labels = read_labelmap(root / "mask" / f"{sid}.pgm")
        cls = meta["classes"][sid]
        scenes.append(Scene(read_image(root / "img" / f"{sid}.ppm"), _masks_from_labels(labels, len(cls)), cls))
    return ids, scenes


def load_video_dataset(root: str | os.PathLike) -> tuple[list[str], list[VideoScene]]:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    if meta.get("kind") != "videos":
        raise ValueError(f"{root} is not a video dataset")
    ids = sorted(meta["classes"])
    videos = []
    for sid in ids:
        cls = meta["classes"][sid]
        seq = root / sid
        frames = []
        for p in sorted(seq.glob("frame_*.ppm")):
            t = p.stem.split("_")[1]
            mask_path = seq / f"mask_{t}.pgm"
            if not mask_path.exists():
                raise FileNotFoundError(mask_path)
            labels = read_labelmap(mask_path)
            frames.append(Scene(read_image(p), _masks_from_labels(labels, len(cls)), cls))
        if not frames:
            raise FileNotFoundError(f"no frames in {seq}")
        videos.append(VideoScene(frames=frames, first_frame_labels=frames[0].labels))
    return ids, videos
