"""Volume records, preprocessing, on-disk manifests, splitting and slice sampling."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError

MODALITIES = ("T1", "T1c", "T2", "FLAIR")
GRADES = ("HGG", "LGG")
# label codes: 0 everything else, 1 NCR, 2 ED, 3 NET, 4 AT
LABEL_CODES = {0: "else", 1: "NCR", 2: "ED", 3: "NET", 4: "AT"}
TUMOR_CODES = (1, 2, 3, 4)
MANIFEST_VERSION = 1
SPLITS = ("train", "val")


@dataclass
class VolumeRecord:
    subject_id: str
    grade: str
    modalities: dict
    label: np.ndarray
    institution: str | None = None

    def __post_init__(self):
        if self.grade not in GRADES:
            raise DataError(f"{self.subject_id}: grade must be one of {GRADES}, got {self.grade!r}")
        if not self.modalities:
            raise DataError(f"{self.subject_id}: no modalities")
        for m, v in self.modalities.items():
            if m not in MODALITIES:
                raise DataError(f"{self.subject_id}: unknown modality {m!r}")
            if v.shape != self.label.shape:
                raise ShapeError(f"{self.subject_id}: {m} shape {v.shape} != label shape {self.label.shape}")
        if self.label.ndim != 3:
            raise ShapeError(f"{self.subject_id}: volumes must be X x Y x Z, got {self.label.shape}")

    @property
    def shape(self):
        return self.label.shape


# preprocessing ----------------------------------------------------------------

def percentile_clip(vol, lo_pct: float = 2, hi_pct: float = 98) -> np.ndarray:
    """Clamp to the [lo_pct, hi_pct] percentiles (linear interpolation between order statistics)."""
    vol = np.asarray(vol)
    if vol.size == 0:
        raise ShapeError("percentile_clip of an empty volume")
    lo, hi = np.percentile(vol, [lo_pct, hi_pct])
    return np.clip(vol, lo, hi).astype(vol.dtype, copy=False)


def feature_scale(vol) -> np.ndarray:
    """Affine map onto [0, 1]; a constant volume maps to zeros."""
    vol = np.asarray(vol)
    dt = np.result_type(vol.dtype, np.float32)
    v = vol.astype(dt)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def _crop_slices(shape, target):
    if len(target) != len(shape):
        raise ShapeError(f"crop target {tuple(target)} has wrong rank for {tuple(shape)}")
    out = []
    for n, t in zip(shape, target):
        if t > n or t < 1:
            raise ShapeError(f"crop target {tuple(target)} exceeds volume {tuple(shape)}")
        lo = (n - t) // 2  # odd margins lose the extra voxel on the high side
        out.append(slice(lo, lo + t))
    return tuple(out)


def center_crop_volume(vol, target) -> np.ndarray:
    vol = np.asarray(vol)
    return vol[_crop_slices(vol.shape, tuple(target))]


def relabel_binary(label) -> np.ndarray:
    """Whole tumour: every tumour code becomes 1, everything else 0."""
    label = np.asarray(label)
    bad = np.setdiff1d(np.unique(label), list(LABEL_CODES))
    if bad.size:
        raise DataError(f"unknown label codes {bad.tolist()}")
    return np.isin(label, TUMOR_CODES).astype(np.uint8)


def preprocess_record(rec: VolumeRecord, crop=None) -> VolumeRecord:
    """Centre crop, then per-volume percentile clip and [0, 1] scaling; binary labels."""
    crop = rec.shape if crop is None else tuple(crop)
    mods = {m: feature_scale(percentile_clip(center_crop_volume(v, crop))).astype(np.float32)
            for m, v in rec.modalities.items()}
    return replace(rec, modalities=mods, label=relabel_binary(center_crop_volume(rec.label, crop)))


# manifests ----------------------------------------------------------------------

@dataclass
class ManifestEntry:
    subject_id: str
    grade: str
    institution: str | None
    modalities: dict  # modality -> relative path
    label: str
    shape: tuple
    dtype: str = "<f4"
    label_dtype: str = "|u1"


@dataclass
class DatasetManifest:
    records: list
    splits: dict = field(default_factory=dict)  # subject_id -> train | val
    root: Path = Path(".")
    format_version: int = MANIFEST_VERSION

    def subjects(self, split: str | None = None) -> list:
        if split is None:
            return [r.subject_id for r in self.records]
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        return [r.subject_id for r in self.records if self.splits.get(r.subject_id) == split]

    def entry(self, subject_id: str) -> ManifestEntry:
        for r in self.records:
            if r.subject_id == subject_id:
                return r
        raise KeyError(subject_id)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "records": [{
                "subject_id": r.subject_id, "grade": r.grade, "institution": r.institution,
                "modalities": dict(r.modalities), "label": r.label, "shape": list(r.shape),
                "dtype": r.dtype, "label_dtype": r.label_dtype,
            } for r in self.records],
            "splits": dict(sorted(self.splits.items())),
        }


def save_manifest(manifest: DatasetManifest, path) -> DatasetManifest:
    """Write ``manifest`` to ``path``; file paths are rewritten relative to the new location."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new_root = path.parent
    if Path(os.path.abspath(manifest.root)) != Path(os.path.abspath(new_root)):
        def rel(p):
            return Path(os.path.relpath(os.path.abspath(manifest.root / p), os.path.abspath(new_root))).as_posix()
        records = [replace(r, modalities={m: rel(p) for m, p in r.modalities.items()}, label=rel(r.label))
                   for r in manifest.records]
        manifest = replace(manifest, records=records, root=new_root)
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except ValueError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if doc.get("format_version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    try:
        records = [ManifestEntry(r["subject_id"], r["grade"], r.get("institution"), dict(r["modalities"]),
                                 r["label"], tuple(r["shape"]), r.get("dtype", "<f4"), r.get("label_dtype", "|u1"))
                   for r in doc["records"]]
    except KeyError as exc:
        raise DataError(f"{path}: record missing field {exc}") from exc
    ids = [r.subject_id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate subject ids")
    splits = dict(doc.get("splits", {}))
    for sid, s in splits.items():
        if s not in SPLITS or sid not in ids:
            raise DataError(f"{path}: bad split entry {sid!r} -> {s!r}")
    m = DatasetManifest(records, splits, path.parent, doc["format_version"])
    if check_files:
        for r in records:
            for rel, dt in [(p, r.dtype) for p in r.modalities.values()] + [(r.label, r.label_dtype)]:
                _check_file(m.root / rel, r.shape, dt)
    return m


def _check_file(path: Path, shape, dtype):
    if not path.exists():
        raise FileNotFoundError(f"missing volume file: {path}")
    want = int(np.prod(shape)) * np.dtype(dtype).itemsize
    got = path.stat().st_size
    if got != want:
        raise DataError(f"{path}: {got} bytes, expected {want} for shape {tuple(shape)} {dtype}")


def write_record(rec: VolumeRecord, root, subdir: str = "volumes") -> ManifestEntry:
    """Store a record as raw little-endian files under ``root/subdir``."""
    root = Path(root)
    (root / subdir).mkdir(parents=True, exist_ok=True)
    mods = {}
    for m in MODALITIES:
        if m in rec.modalities:
            rel = f"{subdir}/{rec.subject_id}_{m}.f32"
            np.ascontiguousarray(rec.modalities[m], dtype="<f4").tofile(root / rel)
            mods[m] = rel
    lab = f"{subdir}/{rec.subject_id}_label.u8"
    np.ascontiguousarray(rec.label, dtype=np.uint8).tofile(root / lab)
    return ManifestEntry(rec.subject_id, rec.grade, rec.institution, mods, lab, tuple(rec.shape))


def read_record(manifest: DatasetManifest, subject_id: str, modalities=None) -> VolumeRecord:
    e = manifest.entry(subject_id)
    wanted = list(e.modalities) if modalities is None else list(modalities)
    mods = {}
    for m in wanted:
        if m not in e.modalities:
            raise DataError(f"{subject_id}: modality {m} not in manifest")
        p = manifest.root / e.modalities[m]
        _check_file(p, e.shape, e.dtype)
        mods[m] = np.fromfile(p, dtype=e.dtype).reshape(e.shape).astype(np.float32)
    p = manifest.root / e.label
    _check_file(p, e.shape, e.label_dtype)
    label = np.fromfile(p, dtype=e.label_dtype).reshape(e.shape)
    return VolumeRecord(e.subject_id, e.grade, mods, label, e.institution)


# splitting --------------------------------------------------------------------------

def stratified_split(manifest: DatasetManifest, frac: float = 0.8, seed: int = 0,
                     strata=("grade",)) -> DatasetManifest:
    """Subject-level split, shuffled and cut at ``frac`` inside every stratum cell.

    Each cell keeps ``floor(frac * n + 0.5)`` subjects for training (nearest,
    ties to train) and the rest for validation.
    """
    if not 0 < frac <= 1:
        raise ValueError("frac must be in (0, 1]")
    if not manifest.records:
        raise DataError("cannot split an empty manifest")
    cells: dict = {}
    for r in manifest.records:
        key = []
        for s in strata:
            v = getattr(r, s, None)
            if v is None:
                raise DataError(f"{r.subject_id}: empty stratum {s!r}")
            key.append(v)
        cells.setdefault(tuple(key), []).append(r.subject_id)
    rng = np.random.default_rng([seed, 1])
    splits = {}
    for key in sorted(cells):
        ids = sorted(cells[key])
        order = rng.permutation(len(ids))
        n_train = int(np.floor(frac * len(ids) + 0.5))
        for rank, i in enumerate(order):
            splits[ids[i]] = "train" if rank < n_train else "val"
    return replace(manifest, splits=splits)


# slices ------------------------------------------------------------------------------

def channel_order(modalities) -> list:
    """Canonical channel order T1, T1c, T2, FLAIR restricted to ``modalities``."""
    mods = list(modalities)
    for m in mods:
        if m not in MODALITIES:
            raise DataError(f"unknown modality {m!r}")
    return [m for m in MODALITIES if m in mods]


class SliceDataset:
    """Preprocessed volumes of one split as a flat pool of axial slices.

    ``images[i]`` is ``Z x X x Y x M`` (float32) and ``labels[i]`` ``Z x X x Y``
    (uint8) for subject ``subject_ids[i]``.
    """

    def __init__(self, records, modalities):
        self.modalities = channel_order(modalities)
        if not self.modalities:
            raise DataError("no modalities selected")
        self.subject_ids, self.images, self.labels = [], [], []
        for r in records:
            missing = [m for m in self.modalities if m not in r.modalities]
            if missing:
                raise DataError(f"{r.subject_id}: missing modalities {missing}")
            vol = np.stack([r.modalities[m] for m in self.modalities], axis=-1)
            self.subject_ids.append(r.subject_id)
            self.images.append(np.ascontiguousarray(vol.transpose(2, 0, 1, 3), dtype=np.float32))
            self.labels.append(np.ascontiguousarray(np.asarray(r.label).transpose(2, 0, 1), dtype=np.uint8))
        if not self.images:
            raise DataError("empty slice dataset")
        self._zcount = np.array([im.shape[0] for im in self.images])
        self._offsets = np.concatenate([[0], np.cumsum(self._zcount)])

    def __len__(self):
        return int(self._offsets[-1])

    @property
    def n_channels(self) -> int:
        return len(self.modalities)

    @property
    def n_subjects(self) -> int:
        return len(self.images)

    def locate(self, flat):
        """Flat slice index -> (subject index, z)."""
        s = np.searchsorted(self._offsets, flat, side="right") - 1
        return s, np.asarray(flat) - self._offsets[s]


def load_split(manifest: DatasetManifest, split: str, modalities=None, crop=None) -> list:
    """Read and preprocess every record of ``split`` (subject-id order)."""
    return [preprocess_record(read_record(manifest, sid, modalities), crop)
            for sid in sorted(manifest.subjects(split))]


def _gather(ds: SliceDataset, flat, ox, oy, crop):
    s, z = ds.locate(flat)
    b = len(flat)
    x = np.empty((b, crop, crop, ds.n_channels), np.float32)
    y = np.empty((b, crop, crop, 1), np.float32)
    for i in range(b):
        img, lab = ds.images[s[i]], ds.labels[s[i]]
        x[i] = img[z[i], ox[i]:ox[i] + crop, oy[i]:oy[i] + crop]
        y[i, ..., 0] = lab[z[i], ox[i]:ox[i] + crop, oy[i]:oy[i] + crop]
    return x, y, list(zip(s.tolist(), z.tolist(), ox.tolist(), oy.tolist()))


def _origins(ds: SliceDataset, flat, crop, rng):
    s, _ = ds.locate(flat)
    hx = np.array([ds.images[i].shape[1] for i in s]) - crop + 1
    hy = np.array([ds.images[i].shape[2] for i in s]) - crop + 1
    if np.any(hx < 1) or np.any(hy < 1):
        raise ShapeError(f"crop {crop} larger than slice extent")
    return rng.integers(0, hx), rng.integers(0, hy)


def sample_training_batch(ds: SliceDataset, batch: int, crop: int, rng: np.random.Generator):
    """Draw ``batch`` slices uniformly (with replacement) plus a uniform crop origin each.

    Draw order: all flat slice indices, then all row origins, then all column
    origins. Returns ``(x, y, draws)`` with ``x`` ``B x crop x crop x M``,
    ``y`` ``B x crop x crop x 1`` and ``draws`` the (subject, z, ox, oy) tuples.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    flat = rng.integers(0, len(ds), size=batch)
    ox, oy = _origins(ds, flat, crop, rng)
    return _gather(ds, flat, ox, oy, crop)


def epoch_batches(ds: SliceDataset, batch: int, crop: int, rng: np.random.Generator):
    """One pass over every slice in shuffled order, ``ceil(len/batch)`` batches."""
    order = rng.permutation(len(ds))
    ox, oy = _origins(ds, order, crop, rng)
    for lo in range(0, len(order), batch):
        sl = slice(lo, lo + batch)
        yield _gather(ds, order[sl], ox[sl], oy[sl], crop)


def eval_slices(rec, crop: int, modalities=None):
    """All z-slices of a preprocessed record, centre-cropped, ascending z.

    Returns ``(x, y)``: ``Z x crop x crop x M`` float32 and ``Z x crop x crop`` uint8.
    """
    mods = channel_order(rec.modalities if modalities is None else modalities)
    vol = np.stack([rec.modalities[m] for m in mods], axis=-1)
    sx, sy, _ = _crop_slices(rec.shape, (crop, crop, rec.shape[2]))
    x = np.ascontiguousarray(vol[sx, sy].transpose(2, 0, 1, 3), dtype=np.float32)
    y = np.ascontiguousarray(np.asarray(rec.label)[sx, sy].transpose(2, 0, 1), dtype=np.uint8)
    return x, y
