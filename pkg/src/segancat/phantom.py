"""Synthetic multi-modal brain-tumour phantoms.

Each subject is a head ellipsoid on a black background filled with a textured
brain field under a smooth bias field, cerebrospinal-fluid pockets, 1-3
lesions (edema shell around an enhancing / non-enhancing core) and Gaussian
noise. The four pseudo-modalities differ in how bright each tissue is:

* FLAIR: lesions brightest, CSF suppressed, small bright "artefact" spots.
* T2: lesions bright, but CSF brighter still.
* T1c: only a mild lesion contrast (enhancing rim brighter) plus very bright vessels.
* T1: lesions slightly darker than brain.

So lesion contrast-to-noise falls FLAIR > T2 > T1c > T1, and every modality
has a distractor the others do not share.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import GRADES, DatasetManifest, VolumeRecord, save_manifest, write_record

INSTITUTIONS = ("inst0", "inst1", "inst2")
NOISE_SIGMA = 0.04

# tissue -> modality -> mean intensity
TISSUE = {
    "brain": {"T1": 0.55, "T1c": 0.50, "T2": 0.40, "FLAIR": 0.40},
    "csf": {"T1": 0.20, "T1c": 0.20, "T2": 1.00, "FLAIR": 0.12},
    "edema": {"T1": 0.48, "T1c": 0.57, "T2": 0.76, "FLAIR": 0.90},
    "active": {"T1": 0.47, "T1c": 0.78, "T2": 0.72, "FLAIR": 0.86},
    "necrosis": {"T1": 0.45, "T1c": 0.32, "T2": 0.80, "FLAIR": 0.82},
    "nonenh": {"T1": 0.47, "T1c": 0.52, "T2": 0.74, "FLAIR": 0.84},
    "vessel": {"T1c": 1.00},
    "spot": {"FLAIR": 0.86},
}
MODS = ("T1", "T1c", "T2", "FLAIR")


def _grid(size):
    axes = [np.arange(n, dtype=np.float64) for n in size]
    return np.meshgrid(*axes, indexing="ij")


def _smooth_field(rng, size, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(size), sigma, mode="reflect")
    return f / (f.std() + 1e-12)


def _ellipsoid(grid, center, radii):
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii))


def _segments(rng, size, mask, n, length, radius):
    """Thin tubes between random points (used for vessels)."""
    out = np.zeros(size, bool)
    pts = np.argwhere(mask)
    for _ in range(n):
        a = pts[rng.integers(len(pts))].astype(float)
        d = rng.standard_normal(3)
        d[2] *= 0.3
        d /= np.linalg.norm(d)
        for t in np.linspace(0, length, int(length * 2)):
            p = np.round(a + t * d).astype(int)
            lo = np.maximum(p - radius, 0)
            hi = np.minimum(p + radius + 1, size)
            out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
    return out & mask


def make_phantom_subject(index: int, size=(96, 96, 32), seed: int = 0) -> VolumeRecord:
    """One subject with raw tumour codes (0 else, 1 NCR, 2 ED, 3 NET, 4 AT)."""
    size = tuple(int(s) for s in size)
    if len(size) != 3 or size[0] < 32 or size[1] < 32 or size[2] < 8:
        raise ValueError(f"phantom size must be at least 32x32x8, got {size}")
    rng = np.random.default_rng([seed, 2, index])
    grade = GRADES[index % len(GRADES)]
    grid = _grid(size)
    c = [(n - 1) / 2 for n in size]
    head = _ellipsoid(grid, c, [0.40 * size[0], 0.44 * size[1], 0.52 * size[2]]) <= 1
    brain = _ellipsoid(grid, c, [0.36 * size[0], 0.40 * size[1], 0.48 * size[2]]) <= 1
    s = min(size[0], size[1]) / 96

    # CSF: a rim at the brain surface plus ventricle-like pockets
    rim = head & ~ndimage.binary_erosion(brain, iterations=max(1, round(2 * s)))
    pocket_field = _smooth_field(rng, size, 5 * s)
    pockets = brain & (pocket_field > np.quantile(pocket_field[brain], 0.93))
    csf = (rim | pockets) & head

    # lesions
    label = np.zeros(size, np.uint8)
    inner = ndimage.binary_erosion(brain, iterations=max(2, round(10 * s)))
    cand = np.argwhere(inner)
    wobble = _smooth_field(rng, size, 3 * s)
    for _ in range(rng.integers(1, 4)):
        ctr = cand[rng.integers(len(cand))]
        radii = rng.uniform(8, 15, 3) * s
        radii[2] = max(3.0, radii[2] * size[2] / size[0] * 2.0)
        r = np.sqrt(_ellipsoid(grid, ctr, radii)) + 0.12 * wobble
        lesion = (r <= 1) & brain
        label[lesion & (label == 0)] = 2
        if grade == "HGG":
            label[(r <= 0.6) & lesion] = 4
            label[(r <= 0.33) & lesion] = 1
        else:
            label[(r <= 0.5) & lesion] = 3
    tumour = label > 0
    csf &= ~tumour

    vessels = _segments(rng, size, brain & ~tumour, n=rng.integers(5, 9), length=30 * s, radius=1)
    spots = np.zeros(size, bool)
    cand_spot = np.argwhere(brain & ~tumour & ~csf)
    for _ in range(rng.integers(2, 5)):
        ctr = cand_spot[rng.integers(len(cand_spot))]
        rad = rng.uniform(2.0, 3.5, 3) * s
        rad[2] = max(1.2, rad[2] * 0.6)
        spots |= _ellipsoid(grid, ctr, rad) <= 1
    spots &= brain & ~tumour & ~csf

    bias = 1 + 0.08 * _smooth_field(rng, size, 12 * s)
    texture = 0.03 * _smooth_field(rng, size, 1.5 * s)
    regions = [("csf", csf), ("edema", label == 2), ("active", label == 4),
               ("necrosis", label == 1), ("nonenh", label == 3)]
    mods = {}
    for m in MODS:
        v = np.zeros(size)
        v[brain | head] = TISSUE["brain"][m]
        for name, mask in regions:
            v[mask] = TISSUE[name][m]
        if m == "T1c":
            v[vessels] = TISSUE["vessel"]["T1c"]
        if m == "FLAIR":
            v[spots] = TISSUE["spot"]["FLAIR"]
        v = np.where(head, (v + texture) * bias, 0.0)
        v = np.abs(v + NOISE_SIGMA * rng.standard_normal(size))
        mods[m] = v.astype(np.float32)
    return VolumeRecord(f"P{index:04d}", grade, mods, label, INSTITUTIONS[index % len(INSTITUTIONS)])


def generate_phantom_dataset(out_dir, n_subjects: int, size=(96, 96, 32), seed: int = 0) -> DatasetManifest:
    """Write ``n_subjects`` phantoms plus ``manifest.json`` under ``out_dir``."""
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    out_dir = Path(out_dir)
    entries = [write_record(make_phantom_subject(i, size, seed), out_dir) for i in range(n_subjects)]
    manifest = DatasetManifest(entries, {}, out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
