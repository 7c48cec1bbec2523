"""Fine-tuning a uni-modal model on another modality under the SD / SDin regimes."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .data import SliceDataset
from .errors import ShapeError
from .metrics import EvalSet, MetricsReport, evaluate
from .models import ArchConfig, ModelPair
from .train import FitResult, TrainConfig, TrainState, fit

REGIMES = ("SD", "SDin")


@dataclass(frozen=True)
class FreezeMask:
    """``SD`` adapts everything; ``SDin`` freezes every discriminator block but ``D/in``."""

    regime: str
    frozen: frozenset

    def trainable(self, pair: ModelPair) -> list:
        return [n for n in pair.named_parameters() if n not in self.frozen]


def build_freeze_mask(pair: ModelPair, regime: str) -> FreezeMask:
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if regime == "SD":
        return FreezeMask(regime, frozenset())
    names = [p.name for p in pair.disc_params() if not p.name.startswith("D/in/")]
    return FreezeMask(regime, frozenset(names))


def apply_freeze_mask(pair: ModelPair, mask: FreezeMask):
    for p in pair.parameters():
        p.set_frozen(p.name in mask.frozen)


@dataclass
class TransferResult:
    pair: ModelPair
    fit: FitResult
    report: MetricsReport
    summary: dict


def _source_checkpoint(source) -> ckpt_io.Checkpoint:
    if isinstance(source, ckpt_io.Checkpoint):
        return source
    if isinstance(source, ModelPair):
        return ckpt_io.Checkpoint(arch=source.arch.to_dict(), params=source.state_dict())
    return ckpt_io.load(Path(source))


def fine_tune(source, train_data: SliceDataset, val_data: EvalSet, regime: str, cfg: TrainConfig, *,
              source_modality: str | None = None, out_dir=None, scratch_dice: float | None = None,
              dtype=np.float32, reset_optimizer: bool = True) -> TransferResult:
    """Load a source model into a fresh pair, freeze per ``regime`` and run :func:`fit`.

    RMSprop accumulators start from zero unless ``reset_optimizer`` is false,
    in which case the source checkpoint's accumulators carry over. ``source``
    is a checkpoint path, a :class:`~segancat.checkpoint.Checkpoint` or a
    :class:`ModelPair`.
    """
    ck = _source_checkpoint(source)
    arch = ArchConfig.from_dict(ck.arch)
    if arch.in_channels != train_data.n_channels or arch.in_channels != len(val_data.modalities):
        raise ShapeError(f"source model has {arch.in_channels} input channels, target data "
                         f"{train_data.n_channels}")
    pair = ModelPair(arch, seed=cfg.seed, dtype=dtype)
    pair.load_state_dict(ck.params)
    mask = build_freeze_mask(pair, regime)
    apply_freeze_mask(pair, mask)
    state = TrainState.fresh(cfg.seed)
    if not reset_optimizer:
        state.acc = {k: v.copy() for k, v in ck.optimizer.items()}
    try:
        result = fit(pair, train_data, val_data, cfg, out_dir=out_dir, state=state)
    finally:
        apply_freeze_mask(pair, FreezeMask("SD", frozenset()))
    report = evaluate(pair, val_data, provenance={"regime": regime, "source_modality": source_modality})
    summary = {
        "source_modality": source_modality,
        "target_modality": "+".join(val_data.modalities),
        "regime": regime,
        "epochs_run": result.epochs_run,
        "best_val_dice": result.best_dice,
        "frozen_parameters": sorted(mask.frozen),
    }
    if scratch_dice is not None:
        summary["comparison_to_scratch"] = {"scratch_val_dice": scratch_dice,
                                            "difference": result.best_dice - scratch_dice}
    if out_dir is not None:
        rep = Path(out_dir) / "reports"
        report.save(rep, "transfer_metrics")
        (rep / "transfer.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return TransferResult(pair, result, report, summary)
