"""Phantom-scale versions of the ablation, modality, cross-modality and transfer studies."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .data import MODALITIES, SliceDataset, load_manifest, load_split, stratified_split
from .metrics import CrossModalityGrid, EvalSet, cross_modality_matrix
from .models import ArchConfig, ModelPair
from .phantom import generate_phantom_dataset
from .train import TrainConfig, fit
from .transfer import fine_tune

# Table I arms: (combine mode, dice term)
ARMS = {
    "SegAN": ("mask", False),
    "SegAN+dice": ("mask", True),
    "SegAN-CAT": ("concat", True),
}


@dataclass(frozen=True)
class PhantomScale:
    """Dataset, network and optimisation sizes for one family of runs."""

    n_subjects: int = 40
    size: tuple = (96, 96, 32)
    volume_crop: tuple = (80, 80, 24)
    input_size: int = 64
    depth: int = 4
    base_filters: int = 8
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 200
    eval_every: int = 1
    patience: int = 300

    def arch(self, in_channels: int, combine_mode: str = "concat") -> ArchConfig:
        return ArchConfig(self.input_size, in_channels, self.depth, self.base_filters, True, combine_mode)

    def train_config(self, seed: int, **kw) -> TrainConfig:
        base = dict(lr=self.lr, batch_size=self.batch_size, crop=self.input_size, patience=self.patience,
                    max_epochs=self.epochs, seed=seed, eval_every=self.eval_every)
        base.update(kw)
        return TrainConfig(**base)

    def to_dict(self) -> dict:
        return asdict(self)


DESK = PhantomScale()
SMALL = PhantomScale(n_subjects=20, size=(48, 48, 16), volume_crop=(40, 40, 12), input_size=32, depth=3,
                     base_filters=8, batch_size=64, lr=1e-3, epochs=30, eval_every=5)


@dataclass
class PhantomSplit:
    train: list
    val: list

    def slices(self, modalities) -> SliceDataset:
        return SliceDataset(self.train, modalities)

    def eval_set(self, crop: int, modalities=MODALITIES) -> EvalSet:
        return EvalSet.from_records(self.val, crop, modalities)


def phantom_split(root, scale: PhantomScale, seed: int, frac: float = 0.8) -> PhantomSplit:
    """Generate (once) and split a phantom dataset; records come back preprocessed."""
    root = Path(root)
    path = root / "manifest.json"
    m = load_manifest(path) if path.exists() else generate_phantom_dataset(root, scale.n_subjects, scale.size, seed)
    m = stratified_split(m, frac, seed)
    return PhantomSplit(load_split(m, "train", crop=scale.volume_crop), load_split(m, "val", crop=scale.volume_crop))


def train_model(split: PhantomSplit, modalities, scale: PhantomScale, seed: int, *, combine_mode="concat",
                use_dice=True, out_dir=None, **cfg_overrides):
    modalities = [m for m in MODALITIES if m in modalities]
    pair = ModelPair(scale.arch(len(modalities), combine_mode), seed=seed)
    cfg = scale.train_config(seed, use_dice=use_dice, **cfg_overrides)
    result = fit(pair, split.slices(modalities), split.eval_set(scale.input_size, modalities), cfg, out_dir=out_dir)
    return pair, result


def ablation_study(split: PhantomSplit, scale: PhantomScale, seed: int) -> dict:
    """Table I analogue: best validation dice per arm (multi-modal input)."""
    out = {}
    for arm, (combine, dice) in ARMS.items():
        _, r = train_model(split, MODALITIES, scale, seed, combine_mode=combine, use_dice=dice)
        out[arm] = r.best_dice
    return out


@dataclass
class ModalityStudy:
    dice: dict  # "T1" .. "FLAIR", "ALL" -> best validation dice
    models: dict  # uni-modal models by modality
    fits: dict
    grid: CrossModalityGrid


def modality_study(split: PhantomSplit, scale: PhantomScale, seed: int) -> ModalityStudy:
    """Table II and cross-modality grid analogues."""
    dice, models, fits = {}, {}, {}
    for mod in MODALITIES:
        pair, r = train_model(split, [mod], scale, seed)
        dice[mod], models[mod], fits[mod] = r.best_dice, pair, r
    _, r = train_model(split, MODALITIES, scale, seed)
    dice["ALL"], fits["ALL"] = r.best_dice, r
    grid = cross_modality_matrix(models, split.eval_set(scale.input_size))
    return ModalityStudy(dice, models, fits, grid)


def transfer_study(source: ModelPair, split: PhantomSplit, scale: PhantomScale, seed: int, *,
                   source_modality="FLAIR", target="T2", regime="SDin", budget: int = 300,
                   scratch_dice: float | None = None) -> dict:
    """Table III analogue: fine-tune ``source`` on ``target`` vs training from scratch, equal budget."""
    if scratch_dice is None:
        _, r = train_model(split, [target], scale, seed, max_epochs=budget)
        scratch_dice = r.best_dice
    cfg = scale.train_config(seed, max_epochs=budget)
    res = fine_tune(source, split.slices([target]), split.eval_set(scale.input_size, [target]), regime, cfg,
                    source_modality=source_modality, scratch_dice=scratch_dice)
    return {"source": source_modality, "target": target, "regime": regime, "budget": budget,
            "transfer_dice": res.fit.best_dice, "scratch_dice": scratch_dice, "result": res}


def with_overrides(scale: PhantomScale, **kw) -> PhantomScale:
    return replace(scale, **kw)


__all__ = ["ARMS", "DESK", "SMALL", "PhantomScale", "PhantomSplit", "phantom_split", "train_model",
           "ablation_study", "modality_study", "transfer_study", "ModalityStudy", "with_overrides"]
