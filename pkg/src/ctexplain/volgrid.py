"""Volume containers, raw+sidecar volume I/O, phantom generation and the toy featurizer.

Arrays are indexed ``[slice, row, col]``. Patient right is image left, so the
right lung sits at smaller column indices than the left lung.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    DimensionMismatch,
    DivisibilityError,
    LesionOutsideOrgan,
    NonFiniteValues,
    OutOfRangeValues,
    PayloadSizeMismatch,
    UnknownLocation,
)

LOCATIONS = (
    "right_lung",
    "left_lung",
    "lung_unspecified",
    "heart",
    "great_vessel",
    "mediastinum",
    "other",
)

# Locations that map onto the single rendered/segmented mediastinal compartment.
MEDIASTINAL_LOCATIONS = ("heart", "great_vessel", "mediastinum")

ORGANS = ("right_lung", "left_lung", "mediastinum")

AIR_INTENSITY = 0.0
BODY_INTENSITY = 0.5
MEDIASTINUM_INTENSITY = 0.55
LUNG_INTENSITY = 0.1

VOLUME_FORMAT = "ctexplain-volume"
MASK_FORMAT = "ctexplain-mask"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CtVolume:
    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    scan_id: str = ""

    def __post_init__(self):
        v = self.voxels
        if v.ndim != 3:
            raise DimensionMismatch(f"volume must be 3D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteValues("volume contains non-finite voxels")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise OutOfRangeValues("voxel intensities must lie in [0, 1]")
        v.setflags(write=False)

    @property
    def shape(self):
        return self.voxels.shape


@dataclass(frozen=True, eq=False)
class FeatureMapStack:
    """Per-slice-group feature maps, shape ``[H, F, D1, D2]``."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 4 or min(v.shape) < 1:
            raise DimensionMismatch(f"feature stack must be [H,F,D1,D2] with all dims >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteValues("feature stack contains non-finite values")
        v.setflags(write=False)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class BinaryMask3D:
    bits: np.ndarray
    organ: str = ""

    def __post_init__(self):
        if self.bits.ndim != 3:
            raise DimensionMismatch(f"mask must be 3D, got shape {self.bits.shape}")
        object.__setattr__(self, "bits", np.ascontiguousarray(self.bits, dtype=bool))
        self.bits.setflags(write=False)

    @property
    def shape(self):
        return self.bits.shape

    def count(self) -> int:
        return int(self.bits.sum())


# ---------------------------------------------------------------------------
# Raw payload + JSON sidecar I/O
# ---------------------------------------------------------------------------


def _sidecar_paths(path, suffix):
    path = Path(path)
    name = path.name
    for ext in (f".{suffix}.json", f".{suffix}.raw"):
        if name.endswith(ext):
            name = name[: -len(ext)]
            break
    stem = path.with_name(name)
    return stem.with_name(name + f".{suffix}.json"), stem.with_name(name + f".{suffix}.raw")


def _atomic_write_bytes(path: Path, data: bytes):
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def save_volume(vol: CtVolume, path, clamp: bool = False):
    """Write ``<stem>.vol.json`` and ``<stem>.vol.raw``. Returns the header path."""
    header_path, raw_path = _sidecar_paths(path, "vol")
    header_path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(vol.voxels, dtype="<f4")
    header = {
        "format": VOLUME_FORMAT,
        "version": FORMAT_VERSION,
        "dims": list(payload.shape),
        "spacing": [float(s) for s in vol.spacing],
        "dtype": "float32",
        "byte_order": "little",
        "order": "C",
        "clamp": bool(clamp),
        "scan_id": vol.scan_id,
    }
    _atomic_write_bytes(raw_path, payload.tobytes())
    _atomic_write_bytes(header_path, (json.dumps(header, indent=2) + "\n").encode())
    return header_path


def _read_header(header_path: Path, raw_path: Path, expected_format):
    if not header_path.exists():
        raise FileNotFoundError(header_path)
    if not raw_path.exists():
        raise FileNotFoundError(raw_path)
    header = json.loads(header_path.read_text())
    if header.get("format") != expected_format:
        raise DimensionMismatch(f"{header_path}: not a {expected_format} header")
    dims = header.get("dims")
    if not isinstance(dims, list) or len(dims) != 3 or any(int(d) < 0 for d in dims):
        raise DimensionMismatch(f"{header_path}: header must declare three non-negative dims")
    return header


def load_volume(path) -> CtVolume:
    """Read a volume written by :func:`save_volume`.

    ``path`` may be the header, the payload, or the bare stem. Out-of-range
    intensities are clamped only when the header sets ``clamp``.
    """
    header_path, raw_path = _sidecar_paths(path, "vol")
    header = _read_header(header_path, raw_path, VOLUME_FORMAT)
    if header.get("dtype") != "float32":
        raise DimensionMismatch(f"unsupported dtype {header.get('dtype')!r}")
    dims = tuple(int(d) for d in header["dims"])
    raw = raw_path.read_bytes()
    expected = int(np.prod(dims)) * 4
    if len(raw) != expected:
        raise PayloadSizeMismatch(
            f"{raw_path}: header declares {dims} ({expected} bytes), payload has {len(raw)} bytes"
        )
    voxels = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if not np.all(np.isfinite(voxels)):
        raise NonFiniteValues(f"{raw_path}: payload contains non-finite values")
    if header.get("clamp", False):
        voxels = np.clip(voxels, 0.0, 1.0)
    return CtVolume(voxels, tuple(header.get("spacing", (1.0, 1.0, 1.0))), header.get("scan_id", ""))


def save_mask(mask: BinaryMask3D, path, extra: Optional[dict] = None):
    header_path, raw_path = _sidecar_paths(path, "mask")
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": MASK_FORMAT,
        "version": FORMAT_VERSION,
        "dims": list(mask.shape),
        "dtype": "uint8",
        "order": "C",
        "organ": mask.organ,
    }
    if extra:
        header.update(extra)
    _atomic_write_bytes(raw_path, mask.bits.astype(np.uint8).tobytes())
    _atomic_write_bytes(header_path, (json.dumps(header, indent=2, sort_keys=True) + "\n").encode())
    return header_path


def load_mask(path) -> BinaryMask3D:
    header_path, raw_path = _sidecar_paths(path, "mask")
    header = _read_header(header_path, raw_path, MASK_FORMAT)
    dims = tuple(int(d) for d in header["dims"])
    raw = raw_path.read_bytes()
    if len(raw) != int(np.prod(dims)):
        raise PayloadSizeMismatch(f"{raw_path}: expected {int(np.prod(dims))} bytes, got {len(raw)}")
    bits = np.frombuffer(raw, dtype=np.uint8).reshape(dims)
    if bits.size and bits.max() > 1:
        raise OutOfRangeValues(f"{raw_path}: mask bytes must be 0 or 1")
    return BinaryMask3D(bits.astype(bool), header.get("organ", ""))


# ---------------------------------------------------------------------------
# Phantom generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple
    radii: tuple

    def mask(self, dims) -> np.ndarray:
        s, r, c = np.ogrid[: dims[0], : dims[1], : dims[2]]
        (cs, cr, cc), (rs, rr, rc) = self.center, self.radii
        return ((s - cs) / rs) ** 2 + ((r - cr) / rr) ** 2 + ((c - cc) / rc) ** 2 <= 1.0


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple  # exclusive

    def mask(self, dims) -> np.ndarray:
        m = np.zeros(dims, dtype=bool)
        m[self.lo[0] : self.hi[0], self.lo[1] : self.hi[1], self.lo[2] : self.hi[2]] = True
        return m


@dataclass(frozen=True)
class Blob:
    """Spherical intensity bump planted in a location."""

    location: str
    center: tuple
    radius: float
    delta: float
    abnormality: str = ""

    def mask(self, dims) -> np.ndarray:
        return Ellipsoid(self.center, (self.radius,) * 3).mask(dims)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (24, 48, 48)
    spacing: tuple = (1.0, 1.0, 1.0)
    # elliptical body cylinder in the (row, col) plane, extends through all slices
    body_center: tuple = (23.5, 23.5)
    body_radii: tuple = (22.5, 23.5)
    right_lung: Ellipsoid = Ellipsoid((11.5, 24.0, 13.0), (8.5, 11.0, 6.5))
    left_lung: Ellipsoid = Ellipsoid((11.5, 24.0, 36.0), (8.5, 11.0, 7.5))
    mediastinum: Box = Box((3, 13, 20), (21, 36, 28))
    lesions: tuple = ()
    confounder: Optional[Blob] = None
    missing_lung: Optional[str] = None  # render this lung as tissue (QC failure injection)
    noise: float = 0.02
    seed: int = 0
    scan_id: str = "phantom"

    def __post_init__(self):
        if self.right_lung.center[2] >= self.left_lung.center[2]:
            raise DimensionMismatch("right-lung center must have a smaller column than the left-lung center")
        for blob in self.lesions + ((self.confounder,) if self.confounder else ()):
            if blob.location not in LOCATIONS or blob.location == "lung_unspecified":
                raise UnknownLocation(f"cannot plant into location {blob.location!r}")
        if self.missing_lung not in (None, "right_lung", "left_lung"):
            raise UnknownLocation(f"missing_lung must be right_lung or left_lung, got {self.missing_lung!r}")


def body_mask(spec: PhantomSpec) -> np.ndarray:
    _, r, c = np.ogrid[: spec.dims[0], : spec.dims[1], : spec.dims[2]]
    (cr, cc), (rr, rc) = spec.body_center, spec.body_radii
    m = ((r - cr) / rr) ** 2 + ((c - cc) / rc) ** 2 <= 1.0
    return np.broadcast_to(m, spec.dims).copy()


def organ_supports(spec: PhantomSpec) -> dict:
    """Exact rendered supports: body, lungs, mediastinal box and the residual ``other`` tissue."""
    dims = spec.dims
    body = body_mask(spec)
    right = spec.right_lung.mask(dims)
    left = spec.left_lung.mask(dims)
    if spec.missing_lung == "right_lung":
        right = np.zeros(dims, dtype=bool)
    elif spec.missing_lung == "left_lung":
        left = np.zeros(dims, dtype=bool)
    med = spec.mediastinum.mask(dims)
    lungs_full = spec.right_lung.mask(dims) | spec.left_lung.mask(dims)
    if (lungs_full & med).any():
        raise DimensionMismatch("mediastinal box overlaps a lung ellipsoid")
    if (lungs_full & ~body).any() or (med & ~body).any():
        raise DimensionMismatch("organs must lie inside the body")
    other = body & ~lungs_full & ~med
    return {"body": body, "right_lung": right, "left_lung": left, "mediastinum": med, "other": other}


def location_support(supports: dict, location: str) -> np.ndarray:
    if location in MEDIASTINAL_LOCATIONS:
        return supports["mediastinum"]
    if location in ("right_lung", "left_lung", "other"):
        return supports[location]
    raise UnknownLocation(location)


def generate_phantom(spec: PhantomSpec):
    """Render a phantom chest volume.

    Returns ``(volume, masks, pairs)`` where ``masks`` maps organ names to the
    exact boolean supports and ``pairs`` is the frozenset of planted
    ``(abnormality, location)`` pairs.
    """
    dims = spec.dims
    sup = organ_supports(spec)
    vol = np.full(dims, AIR_INTENSITY, dtype=np.float64)
    vol[sup["body"]] = BODY_INTENSITY
    vol[sup["mediastinum"]] = MEDIASTINUM_INTENSITY
    vol[sup["right_lung"] | sup["left_lung"]] = LUNG_INTENSITY

    pairs = set()
    for blob in spec.lesions:
        region = location_support(sup, blob.location)
        bm = blob.mask(dims)
        if not bm.any() or (bm & ~region).any():
            raise LesionOutsideOrgan(
                f"{blob.abnormality or 'blob'} at {blob.center} r={blob.radius} is not inside {blob.location}"
            )
        vol[bm] += blob.delta
        pairs.add((blob.abnormality, blob.location))
    if spec.confounder is not None:
        cb = spec.confounder
        bm = cb.mask(dims)
        if not bm.any() or (bm & ~location_support(sup, cb.location)).any():
            raise LesionOutsideOrgan(f"confounder at {cb.center} is not inside {cb.location}")
        vol[bm] += cb.delta

    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        vol += rng.normal(0.0, spec.noise, size=dims)
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)

    masks = {k: sup[k] for k in ("right_lung", "left_lung", "mediastinum", "body")}
    return CtVolume(vol, tuple(spec.spacing), spec.scan_id), masks, frozenset(pairs)


# ---------------------------------------------------------------------------
# Toy featurizer
# ---------------------------------------------------------------------------

FEATURE_NAMES = ("mean", "max", "min", "mean_abs_gradient")


def toy_featurize(vol, g: int = 3, pool: int = 4) -> FeatureMapStack:
    """Block statistics over ``g x pool x pool`` blocks.

    Channels are mean, max, min and the mean absolute difference between
    adjacent voxels inside the block (all three axes pooled). Differences never
    cross block borders, so each output cell depends only on its own block.
    """
    v = vol.voxels if isinstance(vol, CtVolume) else np.asarray(vol)
    S, R1, R2 = v.shape
    if g < 1 or pool < 1 or S % g or R1 % pool or R2 % pool:
        raise DivisibilityError(f"shape {v.shape} is not divisible by (g={g}, pool={pool}, pool={pool})")
    H, D1, D2 = S // g, R1 // pool, R2 // pool
    # [H, D1, D2, g, pool, pool]
    blocks = v.astype(np.float64).reshape(H, g, D1, pool, D2, pool).transpose(0, 2, 4, 1, 3, 5)
    flat = blocks.reshape(H, D1, D2, -1)
    diffs = [
        np.abs(np.diff(blocks, axis=ax)).reshape(H, D1, D2, -1)
        for ax, n in ((3, g), (4, pool), (5, pool))
        if n > 1
    ]
    if diffs:
        grad = np.concatenate(diffs, axis=-1).mean(axis=-1)
    else:
        grad = np.zeros((H, D1, D2))
    out = np.stack([flat.mean(axis=-1), flat.max(axis=-1), flat.min(axis=-1), grad], axis=1)
    return FeatureMapStack(out)
