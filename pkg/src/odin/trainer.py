"""Online / target / discovery networks, their update rules and checkpoints."""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import (
    ViewGeometry,
    apply_augmentation,
    crop_resize,
    sample_augmentation,
    spanning_view,
    warp_mask,
)
from .config import ConfigError, RunConfig, build_config, flatten
from .discovery import SegmentationCache, discover
from .model import Params, as_leaves, init_params
from .objective import DegenerateBatch, contrastive_loss, forward_view

MAGIC = b"ODIN1"
PARAM_SETS = ("online", "target", "discovery")


class NumericalError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainerState:
    online: Params
    target: Params
    discovery: Params
    momentum: Params
    step: int
    epoch: int
    seed: int
    config: RunConfig

    def params(self, which: str) -> Params:
        """``online``/``target``/``teacher`` (= discovery) parameter set."""
        key = {"online": "online", "target": "target", "teacher": "discovery", "discovery": "discovery"}[which]
        return getattr(self, key)


def init_state(config: RunConfig, seed: int | None = None) -> TrainerState:
    seed = config.run.seed if seed is None else seed
    online = init_params(config.model, np.random.default_rng([seed, 0x1417]))
    return TrainerState(
        online=online,
        target={k: v.copy() for k, v in online.items()},
        discovery={k: v.copy() for k, v in online.items()},
        momentum={k: np.zeros_like(v) for k, v in online.items()},
        step=0,
        epoch=0,
        seed=seed,
        config=config,
    )


# -- schedules and update rules ----------------------------------------------------


def lr_at(step: int, base_lr: float, total_steps: int, warmup_steps: int) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine decay to 0."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def target_rate_at(step: int, rate: float, total_steps: int, schedule: str = "fixed") -> float:
    """Per-step target EMA rate; ``cosine`` ramps it from ``rate`` down to 0."""
    if schedule == "fixed":
        return rate
    progress = min(1.0, step / max(1, total_steps))
    return rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def ema_update(slow: Params, fast: Params, rate: float) -> Params:
    """``(1 - rate) * slow + rate * fast``; rate 0 and 1 return exact copies."""
    if rate == 0.0:
        return {k: v.copy() for k, v in slow.items()}
    if rate == 1.0:
        return {k: v.copy() for k, v in fast.items()}
    return {k: (1.0 - rate) * slow[k] + rate * fast[k] for k in slow}


def _exempt(array: np.ndarray) -> bool:
    return array.ndim <= 1


def optimizer_step(
    params: Params,
    grads: Params,
    momentum: Params,
    kind: str = "sgd_momentum",
    lr: float = 0.1,
    weight_decay: float = 0.0,
    beta: float = 0.9,
    eps: float = 1e-9,
) -> tuple[Params, Params]:
    """One SGD-momentum or LARS step; returns (params, momentum buffers).

    LARS scales each non-bias array's update by ``‖θ‖ / (‖g + wd·θ‖ + eps)``;
    1-d arrays skip both weight decay and the trust ratio.
    """
    if kind not in ("sgd_momentum", "lars"):
        raise ValueError(f"unknown optimizer {kind!r}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ad.ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    new_params, new_momentum = {}, {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = theta.copy()
            new_momentum[name] = momentum[name].copy()
            continue
        exempt = _exempt(theta)
        if not exempt:
            g = g + weight_decay * theta
        if kind == "lars" and not exempt:
            p_norm = float(np.linalg.norm(theta))
            g_norm = float(np.linalg.norm(g))
            trust = p_norm / (g_norm + eps) if p_norm > 0 and g_norm > 0 else 1.0
            g = trust * g
        v = beta * momentum[name] + g
        new_momentum[name] = v
        new_params[name] = theta - lr * v
    return new_params, new_momentum


# -- training ----------------------------------------------------------------------


class Trainer:
    """Runs training steps over an in-memory image set.

    ``images`` is a list of H×W×3 arrays; indices into it double as the
    segmentation-cache keys.
    """

    def __init__(self, config: RunConfig, images: list[np.ndarray], state: TrainerState | None = None):
        self.config = config
        self.images = images
        self.state = state or init_state(config)
        self.cache = SegmentationCache(enabled=config.discovery.schedule == "discrete")
        self.discovery_forwards = 0

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.images) // self.config.optim.batch_size)

    def batch_indices(self, step: int) -> np.ndarray:
        bs = self.config.optim.batch_size
        epoch, offset = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.state.seed, 0xE90C, epoch]).permutation(len(self.images))
        if bs > len(order):
            order = np.resize(order, bs)
        return order[offset * bs : offset * bs + bs]

    def _segment(self, index: int, image: np.ndarray, v0: ViewGeometry, seed: int) -> np.ndarray:
        cfg = self.config

        def compute():
            self.discovery_forwards += 1
            view = crop_resize(image, v0)
            return discover(view, self.state.discovery, cfg.discovery.K, cfg.model, cfg.discovery.source, seed)

        if self.cache.enabled:
            return self.cache.get_or_compute(int(index), compute)
        return compute()

    def prepare(self, indices: np.ndarray, step: int):
        """Augment, discover and warp masks for one batch (no gradients)."""
        cfg = self.config
        aug = cfg.augment
        K = cfg.discovery.K
        view_grid = cfg.model.grid((aug.view_size, aug.view_size))
        ds = aug.discovery_size
        views1, views2, masks1, masks2 = [], [], [], []
        for slot, index in enumerate(indices):
            image = self.images[index]
            size = image.shape[:2]
            rng = np.random.default_rng([self.state.seed, int(index), step, slot])
            s1 = sample_augmentation(rng, "T1", aug, size)
            s2 = sample_augmentation(rng, "T2", aug, size)
            if self.cache.enabled:
                # cached segmentations are computed once on the full image
                v0 = ViewGeometry(0, 0, size[1], size[0], False, (ds, ds))
                seed = int(index)
            else:
                v0 = spanning_view(s1.geometry, s2.geometry, (ds, ds))
                seed = int(rng.integers(2**31))
            labels = self._segment(index, image, v0, seed)
            masks1.append(warp_mask(labels, v0, s1.geometry, view_grid, K))
            masks2.append(warp_mask(labels, v0, s2.geometry, view_grid, K))
            views1.append(apply_augmentation(image, s1, aug.blur_kernel))
            views2.append(apply_augmentation(image, s2, aug.blur_kernel))
        return np.stack(views1), np.stack(views2), np.stack(masks1), np.stack(masks2)

    def loss_graph(self, leaves, views1, views2, masks1, masks2) -> ad.Tensor:
        cfg = self.config
        n = len(views1)
        images = np.concatenate([views1, views2])
        masks = np.concatenate([masks1, masks2])
        online = forward_view(images, leaves, masks, cfg.model, online=True)
        target = forward_view(images, self.state.target, masks, cfg.model, online=False)
        valid = online.valid[:n] & online.valid[n:]
        q = online.prediction
        q1, q2 = ad.take(q, slice(0, n)), ad.take(q, slice(n, 2 * n))
        z = target.projection.data
        return contrastive_loss((q1, q2), (z[:n], z[n:]), valid, cfg.optim.alpha)

    def step(self) -> dict:
        cfg = self.config
        st = self.state
        step = st.step
        indices = self.batch_indices(step)
        views1, views2, masks1, masks2 = self.prepare(indices, step)
        lr = lr_at(step, cfg.optim.base_lr, cfg.optim.total_steps, cfg.optim.warmup_steps)
        leaves = as_leaves(st.online)
        try:
            loss = self.loss_graph(leaves, views1, views2, masks1, masks2)
        except DegenerateBatch:
            warnings.warn(f"step {step}: no valid segments, skipping", RuntimeWarning, stacklevel=2)
            self._advance()
            return {"step": step, "loss": None, "lr": lr, "grad_norm": 0.0, "skipped": True}
        ad.backward(loss)
        grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
        grad_norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise NumericalError(f"non-finite loss at step {step}")
        st.online, st.momentum = optimizer_step(
            st.online, grads, st.momentum, cfg.optim.kind, lr, cfg.optim.weight_decay, cfg.optim.momentum
        )
        rate = target_rate_at(step, cfg.optim.target_rate, cfg.optim.total_steps, cfg.optim.target_schedule)
        st.target = ema_update(st.target, st.online, rate)
        self._advance()
        return {"step": step, "loss": loss_value, "lr": lr, "grad_norm": grad_norm}

    def _advance(self) -> None:
        cfg = self.config
        st = self.state
        st.step += 1
        st.epoch = st.step // self.steps_per_epoch
        if cfg.discovery.schedule == "continuous":
            st.discovery = ema_update(st.discovery, st.online, cfg.discovery.rate)
        elif st.step % (cfg.discovery.period_epochs * self.steps_per_epoch) == 0:
            st.discovery = ema_update(st.discovery, st.online, 1.0)
            self.cache.bump()

    def run(self, steps: int | None = None, on_step=None) -> list[dict]:
        total = self.config.optim.total_steps if steps is None else steps
        history = []
        while self.state.step < total:
            metrics = self.step()
            history.append(metrics)
            if on_step is not None:
                on_step(metrics)
        return history


# -- checkpoints -------------------------------------------------------------------


def _header(state: TrainerState) -> tuple[dict, list[np.ndarray]]:
    arrays, entries = [], []
    for which in (*PARAM_SETS, "momentum"):
        params = getattr(state, which)
        for name in sorted(params):
            a = np.ascontiguousarray(params[name], dtype="<f8")
            entries.append({"name": f"{which}/{name}", "shape": list(a.shape)})
            arrays.append(a)
    header = {
        "format": 1,
        "step": state.step,
        "epoch": state.epoch,
        "seed": state.seed,
        "config": flatten(state.config),
        "arrays": entries,
    }
    return header, arrays


def checkpoint_bytes(state: TrainerState) -> bytes:
    header, arrays = _header(state)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(a.tobytes() for a in arrays)


def checkpoint_save(state: TrainerState, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def checkpoint_from_bytes(buf: bytes) -> TrainerState:
    if buf[:5] != MAGIC:
        raise CheckpointError(f"magic: expected {MAGIC!r}, got {buf[:5]!r}")
    if len(buf) < 13:
        raise CheckpointError("header_length: file truncated")
    (n,) = struct.unpack("<Q", buf[5:13])
    try:
        header = json.loads(buf[13 : 13 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"header: {exc}") from exc
    try:
        config = build_config(header["config"])
        step, epoch, seed = int(header["step"]), int(header["epoch"]), int(header["seed"])
        entries = list(header["arrays"])
    except ConfigError as exc:
        raise CheckpointError(f"config: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"header: missing or malformed field {exc}") from exc
    offset = 13 + n
    sets: dict[str, Params] = {k: {} for k in (*PARAM_SETS, "momentum")}
    for entry in entries:
        which, name = entry["name"].split("/", 1)
        if which not in sets:
            raise CheckpointError(f"arrays: unknown parameter set in {entry['name']}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(buf):
            raise CheckpointError(f"payload: truncated while reading {entry['name']}")
        sets[which][name] = np.frombuffer(buf[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(buf):
        raise CheckpointError(f"payload: {len(buf) - offset} trailing bytes")
    reference = init_params(config.model, np.random.default_rng(0))
    for which, params in sets.items():
        for name, ref in reference.items():
            if name not in params:
                raise CheckpointError(f"{which}/{name}: missing")
            if params[name].shape != ref.shape:
                raise CheckpointError(f"{which}/{name}: shape {params[name].shape} != expected {ref.shape}")
    return TrainerState(
        online=sets["online"],
        target=sets["target"],
        discovery=sets["discovery"],
        momentum=sets["momentum"],
        step=step,
        epoch=epoch,
        seed=seed,
        config=config,
    )


def checkpoint_load(path: str | Path) -> TrainerState:
    return checkpoint_from_bytes(Path(path).read_bytes())
