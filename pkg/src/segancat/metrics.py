"""Per-volume confusion counts, dice / precision / sensitivity, reports and the cross-modality grid."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import MODALITIES, channel_order, eval_slices
from .errors import ShapeError
from .models import ModelPair, segment
from .tensor import Tensor, no_grad

THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def volume_confusion(pred_slices, label_slices, threshold: float = THRESHOLD) -> ConfusionCounts:
    """Counts over every voxel of a volume; predictions ``>= threshold`` are positive."""
    pred = np.asarray(pred_slices)
    lab = np.asarray(label_slices)
    if pred.shape != lab.shape:
        raise ShapeError(f"prediction {pred.shape} and label {lab.shape} differ")
    p = pred >= threshold
    g = lab.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p)) - tp
    fn = int(np.count_nonzero(g)) - tp
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def scores(c: ConfusionCounts):
    """``(dice, precision, sensitivity)``.

    Zero denominators: dice and sensitivity are 1; precision is 1 when nothing
    was missed either (empty truth) and 0 otherwise.
    """
    den = 2 * c.tp + c.fp + c.fn
    # 1 - (fp + fn) / den equals 2tp / den and matches one minus the dice loss bit for bit
    dice = 1.0 - (c.fp + c.fn) / den if den else 1.0
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else (1.0 if c.fn == 0 else 0.0)
    sensitivity = c.tp / (c.tp + c.fn) if c.tp + c.fn else 1.0
    return dice, precision, sensitivity


@dataclass
class VolumeScore:
    subject_id: str
    dice: float
    precision: float
    sensitivity: float
    counts: ConfusionCounts


@dataclass
class MetricsReport:
    rows: list
    provenance: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> dict:
        if not self.rows:
            return {"dice": float("nan"), "precision": float("nan"), "sensitivity": float("nan")}
        return {k: float(np.mean([getattr(r, k) for r in self.rows])) for k in ("dice", "precision", "sensitivity")}

    @property
    def mean_dice(self) -> float:
        return self.aggregate["dice"]

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "aggregate": self.aggregate,
            "volumes": [{"subject_id": r.subject_id, "dice": r.dice, "precision": r.precision,
                         "sensitivity": r.sensitivity, **r.counts.to_dict()} for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject_id", "dice", "precision", "sensitivity", "tp", "fp", "tn", "fn"])
        for r in self.rows:
            c = r.counts
            w.writerow([r.subject_id, repr(r.dice), repr(r.precision), repr(r.sensitivity), c.tp, c.fp, c.tn, c.fn])
        agg = self.aggregate
        w.writerow(["mean", repr(agg["dice"]), repr(agg["precision"]), repr(agg["sensitivity"]), "", "", "", ""])
        return buf.getvalue()

    def save(self, directory, stem: str = "metrics"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.json").write_text(self.to_json())
        (directory / f"{stem}.csv").write_text(self.to_csv())


@dataclass
class EvalSet:
    """Centre-cropped slices of a set of preprocessed volumes, ready for inference."""

    subject_ids: list
    images: list  # Z x crop x crop x M each
    labels: list  # Z x crop x crop each
    modalities: list

    @classmethod
    def from_records(cls, records, crop: int, modalities=None) -> "EvalSet":
        records = sorted(records, key=lambda r: r.subject_id)
        mods = channel_order(modalities if modalities is not None else records[0].modalities)
        xs, ys = zip(*[eval_slices(r, crop, mods) for r in records]) if records else ((), ())
        return cls([r.subject_id for r in records], list(xs), list(ys), mods)

    def with_channels(self, modalities) -> "EvalSet":
        """Select a subset of channels (e.g. one modality for a uni-modal model)."""
        mods = channel_order(modalities)
        idx = [self.modalities.index(m) for m in mods]
        return EvalSet(self.subject_ids, [np.ascontiguousarray(x[..., idx]) for x in self.images], self.labels, mods)


def predict_slices(pair: ModelPair, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Probability maps ``N x H x W`` in inference mode."""
    out = []
    with no_grad():
        for lo in range(0, len(x), batch_size):
            out.append(segment(pair, Tensor(x[lo:lo + batch_size].astype(pair.dtype, copy=False)), "infer").data[..., 0])
    return np.concatenate(out) if out else np.zeros((0,) + x.shape[1:3], pair.dtype)


def evaluate(pair: ModelPair, data: EvalSet, threshold: float = THRESHOLD, batch_size: int = 64,
             provenance: dict | None = None) -> MetricsReport:
    if data.images and data.images[0].shape[-1] != pair.arch.in_channels:
        raise ShapeError(f"model expects {pair.arch.in_channels} channels, data has {data.images[0].shape[-1]}")
    rows = []
    for sid, x, y in zip(data.subject_ids, data.images, data.labels):
        c = volume_confusion(predict_slices(pair, x, batch_size), y, threshold)
        d, p, s = scores(c)
        rows.append(VolumeScore(sid, d, p, s, c))
    prov = {"modalities": list(data.modalities), "threshold": threshold}
    prov.update(provenance or {})
    return MetricsReport(rows, prov)


@dataclass
class CrossModalityGrid:
    """``values[i][j]``: mean dice of the model trained on ``rows[i]`` evaluated on ``cols[j]``."""

    rows: list
    cols: list
    values: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trained_on"] + list(self.cols))
        for name, vals in zip(self.rows, self.values):
            w.writerow([name] + [repr(float(v)) for v in vals])
        return buf.getvalue()

    def plot_data(self) -> dict:
        return {"row_labels": list(self.rows), "col_labels": list(self.cols),
                "values": [[float(v) for v in r] for r in self.values]}

    def save(self, directory, stem: str = "crossmodality"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.csv").write_text(self.to_csv())
        (directory / f"{stem}_plot.json").write_text(json.dumps(self.plot_data(), indent=2) + "\n")

    def diagonal_dominant_rows(self) -> list:
        """Per row: is the training modality's own column the (first) maximum?"""
        return [self.cols[int(np.argmax(v))] == r for r, v in zip(self.rows, self.values)]


def cross_modality_matrix(models: dict, data: EvalSet, threshold: float = THRESHOLD) -> CrossModalityGrid:
    """Evaluate every uni-modal model on every modality of ``data`` (a multi-channel set)."""
    rows = [m for m in MODALITIES if m in models]
    cols = [m for m in MODALITIES if m in data.modalities]
    archs = {models[m].arch for m in rows}
    if len(archs) != 1 or next(iter(archs)).in_channels != 1:
        raise ShapeError("cross-modality evaluation needs uni-modal models sharing one architecture")
    per_mod = {c: data.with_channels([c]) for c in cols}
    vals = np.array([[evaluate(models[r], per_mod[c], threshold).mean_dice for c in cols] for r in rows])
    return CrossModalityGrid(rows, cols, vals)
