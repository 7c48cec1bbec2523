"""Segmentator / discriminator assembly and the discriminator input operator."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .blocks import BlockSpec, apply_block, make_block
from .errors import ConfigError, ShapeError
from .tensor import Parameter, Tensor, concat_channels, elementwise_mul

COMBINE_MODES = ("concat", "mask")


@dataclass(frozen=True)
class ArchConfig:
    input_size: int = 64
    in_channels: int = 4
    depth: int = 4
    base_filters: int = 8
    skip_connections: bool = True
    combine_mode: str = "concat"

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError("must be positive", "in_channels")
        if self.depth < 1:
            raise ConfigError("must be >= 1", "depth")
        if self.base_filters < 1:
            raise ConfigError("must be positive", "base_filters")
        if self.input_size < 1 or self.input_size % (2 ** self.depth):
            raise ConfigError(f"must be a positive multiple of 2**depth={2 ** self.depth}", "input_size")
        if self.combine_mode not in COMBINE_MODES:
            raise ConfigError(f"must be one of {COMBINE_MODES}", "combine_mode")

    @property
    def disc_in_channels(self) -> int:
        return self.in_channels + 1 if self.combine_mode == "concat" else self.in_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError("unknown architecture key", sorted(extra)[0])
        return cls(**d)


class ModelPair:
    """Segmentator S and discriminator D for one :class:`ArchConfig`.

    S is ``S_in(k0)``, ``depth-1`` encoder blocks doubling the filters,
    ``depth-1`` decoder blocks halving them and ``S_out(1)``. D is ``D_in(k0)``
    followed by ``depth-1`` encoder blocks. Parameters are named ``S/...`` and
    ``D/...``.
    """

    def __init__(self, arch: ArchConfig, seed: int = 0, dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng([seed, 0])
        e, k0 = arch.depth, arch.base_filters

        self.encoder: list[BlockSpec] = [make_block("S_in", arch.in_channels, k0, "S/in", rng, dtype)]
        for i in range(1, e):
            self.encoder.append(make_block("S_enc", k0 * 2 ** (i - 1), k0 * 2 ** i, f"S/enc{i}", rng, dtype))
        self.decoder: list[BlockSpec] = []
        ch = k0 * 2 ** (e - 1)
        for i in range(e - 1):
            filters = k0 * 2 ** (e - 2 - i)
            cin = ch if i == 0 or not arch.skip_connections else 2 * ch
            self.decoder.append(make_block("S_dec", cin, filters, f"S/dec{i + 1}", rng, dtype))
            ch = filters
        cin = ch if e == 1 or not arch.skip_connections else 2 * ch
        self.decoder.append(make_block("S_out", cin, 1, "S/out", rng, dtype))

        self.disc: list[BlockSpec] = [make_block("D_in", arch.disc_in_channels, k0, "D/in", rng, dtype)]
        for i in range(1, e):
            self.disc.append(make_block("D_enc", k0 * 2 ** (i - 1), k0 * 2 ** i, f"D/enc{i}", rng, dtype))

    # parameter access ---------------------------------------------------------
    def seg_params(self) -> list:
        return [p for blk in self.encoder + self.decoder for p in blk.params.values()]

    def disc_params(self) -> list:
        return [p for blk in self.disc for p in blk.params.values()]

    def parameters(self) -> list:
        return self.seg_params() + self.disc_params()

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def state_dict(self) -> dict:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict):
        params = self.named_parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            raise ShapeError(f"state mismatch: missing={missing[:3]} unexpected={unexpected[:3]}")
        for name, arr in state.items():
            p = params[name]
            if tuple(arr.shape) != p.shape:
                raise ShapeError(f"{name}: shape {tuple(arr.shape)} != {p.shape}")
            p.data[...] = arr

    def zero_grad(self):
        for p in self.parameters():
            p.tensor.grad = None


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def segment(pair: ModelPair, x, mode: str = "train") -> Tensor:
    """Probability map ``[N x] H x W x 1`` for slices ``[N x] H x W x M``."""
    x = _as_tensor(x, pair.dtype)
    arch = pair.arch
    if x.shape[-1] != arch.in_channels or x.shape[-3] % 2 ** arch.depth or x.shape[-2] % 2 ** arch.depth:
        raise ShapeError(f"input {x.shape} incompatible with {arch}")
    h = x
    skips = []
    for blk in pair.encoder:
        h = apply_block(blk, h, mode)
        skips.append(h)
    for i, blk in enumerate(pair.decoder):
        if i > 0 and arch.skip_connections:
            h = concat_channels([h, skips[arch.depth - 1 - i]])
        h = apply_block(blk, h, mode)
    return h


def combine_input(x, prob_map, mode: str) -> Tensor:
    """Discriminator input: channel concatenation or pixel-wise masking."""
    x = _as_tensor(x, np.float32)
    prob_map = _as_tensor(prob_map, x.dtype)
    if prob_map.shape[:-1] != x.shape[:-1] or prob_map.shape[-1] != 1:
        raise ShapeError(f"map {prob_map.shape} does not match slice {x.shape}")
    if mode == "concat":
        return concat_channels([x, prob_map])
    if mode == "mask":
        return elementwise_mul(x, prob_map)
    raise ValueError(f"unknown combine mode {mode!r}")


def discriminator_features(pair: ModelPair, d_in, mode: str = "train") -> list:
    """``[d_in, act_1, ..., act_E]``: the input followed by every block output."""
    d_in = _as_tensor(d_in, pair.dtype)
    if d_in.shape[-1] != pair.arch.disc_in_channels:
        raise ShapeError(f"discriminator expects {pair.arch.disc_in_channels} channels, got {d_in.shape[-1]}")
    feats = [d_in]
    h = d_in
    for blk in pair.disc:
        h = apply_block(blk, h, mode)
        feats.append(h)
    return feats


def clip_discriminator(pair: ModelPair):
    for p in pair.disc_params():
        p.clamp_()


def clip_bounded(pair: ModelPair) -> list:
    return [p for p in pair.parameters() if p.clip is not None]


def params_by_block(pair: ModelPair) -> dict:
    """Block prefix (e.g. ``D/enc1``) -> list of its parameters."""
    out: dict = {}
    for p in pair.parameters():
        prefix = p.name.rsplit("/", 2)[0]
        out.setdefault(prefix, []).append(p)
    return out


__all__ = [
    "ArchConfig", "ModelPair", "Parameter", "segment", "combine_input", "discriminator_features",
    "clip_discriminator", "clip_bounded", "params_by_block", "COMBINE_MODES",
]
