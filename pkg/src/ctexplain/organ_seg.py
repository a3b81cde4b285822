"""Unsupervised morphological segmentation of the lungs and mediastinum.

Lungs come from a four-step pipeline (air threshold, exterior-air removal,
per-component hole filling, small-object removal). The lung bounding box is
bisected into right and left, and the mediastinum is the tissue inside a
central band of that box. A bounding-box QC check decides when to fall back to
fixed heuristic halves.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import EmptyMask
from .volgrid import BinaryMask3D, CtVolume

# full-resolution reference: 1e6 voxels on a 405 x 420 x 420 grid
REFERENCE_MIN_VOLUME_FRACTION = 1_000_000 / (405 * 420 * 420)


@dataclass(frozen=True)
class SegParams:
    tau: float = 0.3
    connectivity: int = 26
    min_volume_fraction: float = REFERENCE_MIN_VOLUME_FRACTION
    min_volume_voxels: Optional[int] = None  # absolute override
    # mediastinal band as fractions of the lung-box width, then shifted (negative = image-left)
    band: tuple = (0.25, 0.75)
    band_shift: float = -0.125
    # QC: per-axis lung bounding-box extent as a fraction of the volume extent
    qc_min_extent: tuple = (0.2, 0.2, 0.2)
    qc_max_extent: tuple = (1.0, 1.0, 0.6)

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.connectivity not in (6, 26):
            raise ValueError(f"connectivity must be 6 or 26, got {self.connectivity}")
        if self.min_volume_voxels is not None and self.min_volume_voxels < 1:
            raise ValueError("min_volume_voxels must be >= 1")
        if not 0.0 <= self.min_volume_fraction < 1.0:
            raise ValueError("min_volume_fraction must lie in [0, 1)")
        if not 0.0 <= self.band[0] < self.band[1] <= 1.0:
            raise ValueError(f"invalid mediastinal band {self.band}")

    def min_volume(self, shape) -> int:
        if self.min_volume_voxels is not None:
            return int(self.min_volume_voxels)
        return max(1, int(round(self.min_volume_fraction * int(np.prod(shape)))))

    def structure(self) -> np.ndarray:
        return ndimage.generate_binary_structure(3, 1 if self.connectivity == 6 else 3)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class QcReport:
    right_dims: tuple
    left_dims: tuple
    passed: bool
    reason: str = ""

    def to_json(self) -> dict:
        return {"right_dims": list(self.right_dims), "left_dims": list(self.left_dims),
                "passed": self.passed, "reason": self.reason}


@dataclass(frozen=True, eq=False)
class OrganMasks:
    right_lung: BinaryMask3D
    left_lung: BinaryMask3D
    mediastinum: BinaryMask3D
    heuristic: bool = False

    @property
    def shape(self):
        return self.right_lung.shape

    def as_dict(self) -> dict:
        return {"right_lung": self.right_lung, "left_lung": self.left_lung, "mediastinum": self.mediastinum}


# ---------------------------------------------------------------------------
# Components
# ---------------------------------------------------------------------------


def label_components(mask: np.ndarray, connectivity: int = 26):
    """Connected components of a boolean 3D mask -> ``(labels, n)``, labels in 1..n."""
    structure = ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=structure)
    return labels, int(n)


def _touches_boundary(labels: np.ndarray) -> set:
    faces = [labels[0], labels[-1], labels[:, 0], labels[:, -1], labels[:, :, 0], labels[:, :, -1]]
    return set(np.unique(np.concatenate([f.ravel() for f in faces]))) - {0}


def fill_holes(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_fill_holes(np.asarray(mask, dtype=bool))


def bounding_box(bits: np.ndarray):
    """``(lo, hi)`` inclusive-exclusive per axis, or None when empty."""
    idx = np.nonzero(bits)
    if idx[0].size == 0:
        return None
    lo = tuple(int(i.min()) for i in idx)
    hi = tuple(int(i.max()) + 1 for i in idx)
    return lo, hi


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------


def segment_lungs(vol: CtVolume, params: SegParams = SegParams()) -> BinaryMask3D:
    v = vol.voxels if isinstance(vol, CtVolume) else np.asarray(vol)
    # (1) air threshold
    air = v < params.tau
    # (2) exterior air = components touching the volume boundary
    labels, n = label_components(air, params.connectivity)
    if n:
        exterior = np.isin(labels, sorted(_touches_boundary(labels)))
        air &= ~exterior
    # (3) components, holes filled one component at a time
    labels, n = label_components(air, params.connectivity)
    out = np.zeros(v.shape, dtype=bool)
    min_vol = params.min_volume(v.shape)
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        comp = labels[sl] == k
        filled = fill_holes(comp)
        # (4) small-object removal
        if filled.sum() >= min_vol:
            out[sl] |= filled
    return BinaryMask3D(out, "lungs")


def split_left_right(lungs: BinaryMask3D):
    """Bisect at the midline column of the lung bounding box.

    Columns below the midline are the patient's right lung (image left).
    """
    bits = lungs.bits
    box = bounding_box(bits)
    if box is None:
        raise EmptyMask("cannot split an empty lung mask")
    (_, _, cmin), (_, _, cmax) = box
    mid = (cmin + cmax - 1) / 2.0
    cols = np.arange(bits.shape[2])[None, None, :]
    right = bits & (cols < mid)
    left = bits & ~(cols < mid)
    return BinaryMask3D(right, "right_lung"), BinaryMask3D(left, "left_lung")


def mediastinum_mask(vol: CtVolume, lungs: BinaryMask3D, right=None, left=None,
                     params: SegParams = SegParams()) -> BinaryMask3D:
    """Non-lung tissue in the shifted central column band of the lung bounding box."""
    v = vol.voxels if isinstance(vol, CtVolume) else np.asarray(vol)
    lung_bits = lungs.bits.copy()
    for extra in (right, left):
        if extra is not None:
            lung_bits |= extra.bits
    box = bounding_box(lung_bits)
    if box is None:
        raise EmptyMask("cannot place a mediastinum without lungs")
    lo, hi = box
    width = hi[2] - lo[2]
    c_lo = lo[2] + (params.band[0] + params.band_shift) * width
    c_hi = lo[2] + (params.band[1] + params.band_shift) * width
    inside = np.zeros(v.shape, dtype=bool)
    inside[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = True
    cols = np.arange(v.shape[2])[None, None, :]
    band = (cols >= c_lo) & (cols < c_hi)
    med = inside & band & ~lung_bits & (v >= params.tau)
    return BinaryMask3D(med, "mediastinum")


def _dims(mask: BinaryMask3D) -> tuple:
    box = bounding_box(mask.bits)
    if box is None:
        return (0, 0, 0)
    return tuple(h - l for l, h in zip(*box))


def qc_check(right: BinaryMask3D, left: BinaryMask3D, params: SegParams = SegParams()) -> QcReport:
    rd, ld = _dims(right), _dims(left)
    shape = right.shape
    for name, d in (("right", rd), ("left", ld)):
        if d == (0, 0, 0):
            return QcReport(rd, ld, False, f"{name} lung absent")
    for name, d in (("right", rd), ("left", ld)):
        for ax, (n, full) in enumerate(zip(d, shape)):
            frac = n / full
            if frac < params.qc_min_extent[ax] or frac > params.qc_max_extent[ax]:
                return QcReport(rd, ld, False, f"{name} lung extent {n} on axis {ax} out of bounds")
    return QcReport(rd, ld, True, "")


def heuristic_mask(dims) -> OrganMasks:
    """Fixed fallback: image-left half, image-right half and the central half of the columns."""
    C = dims[2]
    cols = np.arange(C)
    right = np.broadcast_to(cols < C / 2, dims)
    left = np.broadcast_to(cols >= C / 2, dims)
    med = np.broadcast_to((cols >= C / 4) & (cols < 3 * C / 4), dims)
    return OrganMasks(
        BinaryMask3D(right.copy(), "right_lung"),
        BinaryMask3D(left.copy(), "left_lung"),
        BinaryMask3D(med.copy(), "mediastinum"),
        heuristic=True,
    )


def segment_organs(vol: CtVolume, params: SegParams = SegParams()):
    """Full pipeline with QC fallback -> ``(OrganMasks, QcReport)``."""
    lungs = segment_lungs(vol, params)
    if lungs.count() == 0:
        empty = BinaryMask3D(np.zeros(lungs.shape, dtype=bool))
        report = qc_check(empty, empty, params)
        return heuristic_mask(lungs.shape), report
    right, left = split_left_right(lungs)
    report = qc_check(right, left, params)
    if not report.passed:
        return heuristic_mask(lungs.shape), report
    med = mediastinum_mask(vol, lungs, right, left, params)
    return OrganMasks(right, left, med, heuristic=False), report
