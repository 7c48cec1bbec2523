"""The six building blocks of the segmentator and discriminator networks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Parameter, Tensor, activation, batch_norm, conv2d, upsample_conv3x3

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
DISC_CLIP = (-0.05, 0.05)

# kind -> (kernel, stride, upsample first, batch norm, activation)
PIPELINES = {
    "S_in": (4, 2, False, False, "leaky_relu"),
    "S_enc": (4, 2, False, True, "leaky_relu"),
    "S_dec": (3, 1, True, True, "relu"),
    "S_out": (3, 1, True, False, "sigmoid"),
    "D_in": (4, 2, False, False, "leaky_relu"),
    "D_enc": (4, 2, False, True, "leaky_relu"),
}

MODES = ("train", "infer")


@dataclass
class BlockSpec:
    kind: str
    filters: int
    in_channels: int
    params: dict = field(default_factory=dict)

    @property
    def kernel(self) -> int:
        return PIPELINES[self.kind][0]

    @property
    def stride(self) -> int:
        return PIPELINES[self.kind][1]

    @property
    def has_bn(self) -> bool:
        return PIPELINES[self.kind][3]

    @property
    def is_discriminator(self) -> bool:
        return self.kind.startswith("D_")


def block_param_names(spec: BlockSpec) -> list:
    names = ["conv/w", "conv/b"]
    if spec.has_bn:
        names += ["bn/gamma", "bn/beta", "bn/mean", "bn/var"]
    return names


def make_block(kind: str, in_channels: int, filters: int, prefix: str, rng: np.random.Generator,
               dtype=np.float32) -> BlockSpec:
    """Build a block with freshly initialised parameters named ``prefix/<local name>``.

    Filters are uniform in +-sqrt(6 / fan_in); for discriminator blocks that
    range is capped at the clip bound so the weights start inside it.
    """
    if kind not in PIPELINES:
        raise ValueError(f"unknown block kind {kind!r}")
    if filters < 1 or in_channels < 1:
        raise ShapeError("block filters and input channels must be positive")
    spec = BlockSpec(kind, filters, in_channels)
    k = spec.kernel
    limit = np.sqrt(6.0 / (k * k * in_channels))
    clip = DISC_CLIP if spec.is_discriminator else None
    if clip is not None:
        limit = min(limit, clip[1])
    w = rng.uniform(-limit, limit, size=(k, k, in_channels, filters)).astype(dtype)
    p = spec.params
    p["conv/w"] = Parameter(f"{prefix}/conv/w", w, clip=clip)
    p["conv/b"] = Parameter(f"{prefix}/conv/b", np.zeros(filters, dtype))
    if spec.has_bn:
        p["bn/gamma"] = Parameter(f"{prefix}/bn/gamma", np.ones(filters, dtype))
        p["bn/beta"] = Parameter(f"{prefix}/bn/beta", np.zeros(filters, dtype))
        p["bn/mean"] = Parameter(f"{prefix}/bn/mean", np.zeros(filters, dtype), trainable=False)
        p["bn/var"] = Parameter(f"{prefix}/bn/var", np.ones(filters, dtype), trainable=False)
    return spec


def apply_block(spec: BlockSpec, x: Tensor, mode: str = "train") -> Tensor:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if x.shape[-1] != spec.in_channels:
        raise ShapeError(f"{spec.kind} expects {spec.in_channels} channels, got {x.shape[-1]}")
    kernel, stride, upsample, bn, act = PIPELINES[spec.kind]
    p = spec.params
    if upsample:
        single = x.ndim == 3
        h = upsample_conv3x3(x.reshape((1,) + x.shape) if single else x, p["conv/w"].tensor, p["conv/b"].tensor)
        x = h.reshape(h.shape[1:]) if single else h
    else:
        x = conv2d(x, p["conv/w"].tensor, p["conv/b"].tensor, stride=stride, padding="same")
    if bn:
        mean, var = p["bn/mean"], p["bn/var"]
        x = batch_norm(x, p["bn/gamma"].tensor, p["bn/beta"].tensor, mean.data, var.data,
                       training=mode == "train", eps=BN_EPS, momentum=BN_MOMENTUM,
                       update_stats=not (mean.frozen or var.frozen))
    return activation(x, act)
