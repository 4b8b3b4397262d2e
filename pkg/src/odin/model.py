"""Small convolutional feature extractor plus projector/predictor MLPs.

Parameters live in a flat ``dict[str, np.ndarray]`` so the online, target
and discovery copies can be averaged, copied and checkpointed uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, ...] = (16, 32, 32)
    strides: tuple[int, ...] = (2, 2, 1)
    kernel: int = 3
    head_hidden: int = 64
    proj_dim: int = 16

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    @property
    def output_stride(self) -> int:
        return int(np.prod(self.strides))

    def grid(self, size: tuple[int, int]) -> tuple[int, int]:
        """Feature grid produced for an input of ``size`` (rows, cols)."""
        rows, cols = size
        for s in self.strides:
            rows = (rows - 1) // s + 1
            cols = (cols - 1) // s + 1
        return rows, cols


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    """He-normal conv/linear weights, zero biases."""
    params: Params = {}
    cin = 3
    for i, cout in enumerate(cfg.channels):
        fan_in = cfg.kernel * cfg.kernel * cin
        params[f"backbone.conv{i}.w"] = rng.normal(0, np.sqrt(2.0 / fan_in), (cfg.kernel, cfg.kernel, cin, cout))
        params[f"backbone.conv{i}.b"] = np.zeros(cout)
        cin = cout
    dims = {
        "proj": (cfg.feature_dim, cfg.head_hidden, cfg.proj_dim),
        "pred": (cfg.proj_dim, cfg.head_hidden, cfg.proj_dim),
    }
    for name, (d_in, d_hidden, d_out) in dims.items():
        params[f"{name}.fc0.w"] = rng.normal(0, np.sqrt(2.0 / d_in), (d_in, d_hidden))
        params[f"{name}.fc0.b"] = np.zeros(d_hidden)
        params[f"{name}.fc1.w"] = rng.normal(0, np.sqrt(1.0 / d_hidden), (d_hidden, d_out))
        params[f"{name}.fc1.b"] = np.zeros(d_out)
    return params


def as_leaves(params: Params) -> dict[str, ad.Tensor]:
    return {k: ad.leaf(v) for k, v in params.items()}


def as_constants(params: Params) -> dict[str, ad.Tensor]:
    return {k: ad.Tensor(v) for k, v in params.items()}


def backbone(params, images, cfg: ModelConfig) -> ad.Tensor:
    """N×H×W×3 images in [0, 1] -> N×h×w×D hidden map.

    Every layer but the last is rectified so the output can take either sign.
    """
    x = ad.as_tensor(images) - 0.5
    last = len(cfg.channels) - 1
    for i, stride in enumerate(cfg.strides):
        x = ad.conv2d(x, params[f"backbone.conv{i}.w"], stride=stride, padding="same")
        x = x + params[f"backbone.conv{i}.b"]
        if i != last:
            x = ad.relu(x)
    return x


def mlp(params, prefix: str, x) -> ad.Tensor:
    hidden = ad.relu(ad.linear(x, params[f"{prefix}.fc0.w"], params[f"{prefix}.fc0.b"]))
    return ad.linear(hidden, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"])


def project(params, h) -> ad.Tensor:
    return mlp(params, "proj", h)


def predict(params, z) -> ad.Tensor:
    return mlp(params, "pred", z)


def features(params: Params, images: np.ndarray, cfg: ModelConfig, source: str = "hidden") -> np.ndarray:
    """Forward-only dense features (hidden or projection) as a plain array."""
    consts = as_constants(params)
    h = backbone(consts, images, cfg)
    if source == "hidden":
        return h.data
    if source == "projection":
        return project(consts, h).data
    raise ValueError(f"source must be 'hidden' or 'projection', got {source!r}")
