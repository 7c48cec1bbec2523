"""Multiscale feature-matching loss, dice loss and the adversarial objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .models import ModelPair, combine_input, discriminator_features, segment
from .tensor import Tensor, grads_disabled, no_grad

OBJECTIVE_MODES = ("for_S", "for_D")


@dataclass
class LossBreakdown:
    mae: float
    dice: float
    total: float


def multiscale_mae(feats_pred, feats_true) -> Tensor:
    """Mean over layers of the mean absolute difference between paired features."""
    feats_pred, feats_true = list(feats_pred), list(feats_true)
    if not feats_pred or len(feats_pred) != len(feats_true):
        raise ShapeError(f"feature lists differ in length: {len(feats_pred)} vs {len(feats_true)}")
    total = None
    for a, b in zip(feats_pred, feats_true):
        if a.shape != b.shape:
            raise ShapeError(f"feature shape mismatch {a.shape} vs {b.shape}")
        term = (a - b).abs().mean()
        total = term if total is None else total + term
    return total * (1.0 / len(feats_pred))


def _dice(g: Tensor, p: Tensor, axis) -> Tensor:
    # 1 - 2 sum(pg) / (sum(p^2) + sum(g^2)) written as sum((p - g)^2) / (sum(p^2) + sum(g^2)):
    # on binary maps the numerator is exactly fp + fn. Both maps empty -> 0 / 1.
    diff = p - g
    sq = (diff * diff).sum(axis=axis)
    den = (p * p).sum(axis=axis) + (g * g).sum(axis=axis)
    empty = (den.data == 0).astype(den.dtype)
    return sq / (den + empty)


def dice_loss(g, p) -> Tensor:
    """``1 - 2 sum(p g) / (sum(p^2) + sum(g^2))`` over every element; 0 when both maps are empty."""
    g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=p.dtype if isinstance(p, Tensor) else None))
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=g.dtype))
    if g.shape != p.shape:
        raise ShapeError(f"dice_loss shape mismatch {g.shape} vs {p.shape}")
    return _dice(g, p, None)


def batch_dice_loss(g: Tensor, p: Tensor) -> Tensor:
    """Mean over the leading batch axis of the per-sample dice loss."""
    if g.shape != p.shape:
        raise ShapeError(f"dice_loss shape mismatch {g.shape} vs {p.shape}")
    axes = tuple(range(1, p.ndim))
    return _dice(g, p, axes).mean()


def _first_nonfinite(pair: ModelPair):
    for p in pair.parameters():
        if not np.all(np.isfinite(p.data)):
            return p.name
    return "forward"


def objective(pair: ModelPair, x, y, mode: str = "for_S", *, use_dice: bool = True,
              pred: Tensor | None = None, net_mode: str = "train") -> LossBreakdown:
    """Evaluate the min-max objective on a batch and backpropagate for one player.

    ``x`` is ``N x H x W x M``, ``y`` the binary ground truth ``N x H x W x 1``.
    ``for_S`` leaves d(mae + dice)/d(theta_S) in the segmentator's ``.grad``;
    ``for_D`` leaves d(-mae)/d(theta_D) in the discriminator's ``.grad`` (so a
    descent step maximises the feature distance). Gradients of the other
    network are left as ``None``. ``pred`` may carry a precomputed S(x).
    """
    if mode not in OBJECTIVE_MODES:
        raise ValueError(f"mode must be one of {OBJECTIVE_MODES}")
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=pair.dtype))
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=pair.dtype))
    if x.ndim != 4 or x.shape[0] < 1:
        raise ShapeError(f"objective needs a non-empty NHWC batch, got {x.shape}")
    if y.shape != x.shape[:-1] + (1,):
        raise ShapeError(f"label batch {y.shape} does not match slices {x.shape}")
    combine = pair.arch.combine_mode
    pair.zero_grad()

    if mode == "for_S":
        if pred is None:
            pred = segment(pair, x, net_mode)
        with grads_disabled(pair.disc_params()):
            with no_grad():
                real = discriminator_features(pair, combine_input(x, y, combine), net_mode)
            fake = discriminator_features(pair, combine_input(x, pred, combine), net_mode)
            mae = multiscale_mae(fake, real)
            dice = batch_dice_loss(y, pred)
            loss = mae + dice if use_dice else mae
            _check_finite(pair, loss, mae, dice)
            if loss.requires_grad:
                loss.backward()
    else:
        if pred is None:
            with no_grad():
                pred = segment(pair, x, net_mode)
        else:
            pred = pred.detach()
        fake = discriminator_features(pair, combine_input(x, pred, combine), net_mode)
        real = discriminator_features(pair, combine_input(x, y, combine), net_mode)
        mae = multiscale_mae(fake, real)
        with no_grad():
            dice = batch_dice_loss(y, pred)
        _check_finite(pair, mae, mae, dice)
        if mae.requires_grad:
            (-mae).backward()

    m, d = float(mae.data), float(dice.data)
    return LossBreakdown(mae=m, dice=d, total=m + d if use_dice else m)


def _check_finite(pair, *tensors):
    if not all(np.all(np.isfinite(t.data)) for t in tensors):
        raise NumericError("non-finite value in forward pass", _first_nonfinite(pair))
