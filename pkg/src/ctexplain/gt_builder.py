"""Attention ground truth: organ masks x report labels -> allowed regions per abnormality.

Masks are downsampled to the head's attention grid ``[H, D1, D2]`` and each
present abnormality's row is the union of the masks of its labeled locations.
Results are cached on disk as packed bitmasks keyed by scan and config hash.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, PayloadSizeMismatch, UnknownLocation
from .mil_head import ABSENT_MODES
from .organ_seg import OrganMasks
from .volgrid import LOCATIONS, MEDIASTINAL_LOCATIONS, BinaryMask3D, _atomic_write_bytes, _sidecar_paths

DOWNSAMPLE_ALGOS = ("nearest", "trilinear", "area")
GT_FORMAT = "ctexplain-gtruth"


@dataclass(frozen=True)
class DownsampleConfig:
    algo: str = "nearest"
    dilate: bool = False
    threshold: float = 0.5

    def __post_init__(self):
        if self.algo not in DOWNSAMPLE_ALGOS:
            raise ValueError(f"unknown downsample algo {self.algo!r}")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in (0, 1], got {self.threshold}")

    @classmethod
    def all_variants(cls) -> list:
        return [cls(algo, dilate) for algo in DOWNSAMPLE_ALGOS for dilate in (False, True)]

    @property
    def name(self) -> str:
        return f"{self.algo}{'+dilate' if self.dilate else ''}"


@dataclass(frozen=True, eq=False)
class AttentionGroundTruth:
    G: np.ndarray  # uint8 [M, H, D1, D2]
    rows_included: np.ndarray  # bool [M]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.G.ndim != 4:
            raise DimensionMismatch(f"G must be [M,H,D1,D2], got {self.G.shape}")
        if self.rows_included.shape != (self.G.shape[0],):
            raise DimensionMismatch("rows_included must have one entry per abnormality")
        if self.G.size and self.G.max() > 1:
            raise ValueError("G entries must be 0 or 1")


# ---------------------------------------------------------------------------
# Downsampling
# ---------------------------------------------------------------------------


def _nearest_index(n_src: int, n_dst: int) -> np.ndarray:
    # source sample at the preimage of each target cell center
    return np.minimum(np.floor((np.arange(n_dst) + 0.5) * n_src / n_dst).astype(int), n_src - 1)


def _linear_axis(x: np.ndarray, axis: int, n_dst: int) -> np.ndarray:
    n_src = x.shape[axis]
    pos = np.clip((np.arange(n_dst) + 0.5) * n_src / n_dst - 0.5, 0.0, n_src - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_src - 1)
    w = pos - i0
    shape = [1] * x.ndim
    shape[axis] = n_dst
    w = w.reshape(shape)
    return np.take(x, i0, axis=axis) * (1.0 - w) + np.take(x, i1, axis=axis) * w


def _area_axis(x: np.ndarray, axis: int, n_dst: int) -> np.ndarray:
    n_src = x.shape[axis]
    cs = np.cumsum(x, axis=axis)
    cs = np.concatenate([np.zeros_like(np.take(cs, [0], axis=axis)), cs], axis=axis)
    i = np.arange(n_dst)
    lo = (i * n_src) // n_dst
    hi = -((-(i + 1) * n_src) // n_dst)  # ceil
    shape = [1] * x.ndim
    shape[axis] = n_dst
    return (np.take(cs, hi, axis=axis) - np.take(cs, lo, axis=axis)) / (hi - lo).reshape(shape)


def downsample_mask(mask, target, cfg: DownsampleConfig = DownsampleConfig()) -> np.ndarray:
    """Binary ``[H, D1, D2]`` grid from a full-resolution mask."""
    bits = mask.bits if isinstance(mask, BinaryMask3D) else np.asarray(mask, dtype=bool)
    target = tuple(int(t) for t in target)
    if len(target) != 3 or any(t < 1 or t > s for t, s in zip(target, bits.shape)):
        raise DimensionMismatch(f"target {target} must be positive and no larger than source {bits.shape}")
    if cfg.algo == "nearest":
        ix = [_nearest_index(s, t) for s, t in zip(bits.shape, target)]
        out = bits[np.ix_(*ix)]
    else:
        x = bits.astype(np.float64)
        step = _linear_axis if cfg.algo == "trilinear" else _area_axis
        for ax, t in enumerate(target):
            x = step(x, ax, t)
        out = x >= cfg.threshold
    if cfg.dilate:
        out = ndimage.binary_dilation(out, structure=ndimage.generate_binary_structure(3, 1))
    return np.ascontiguousarray(out, dtype=bool)


# ---------------------------------------------------------------------------
# Ground truth assembly
# ---------------------------------------------------------------------------


def location_mask(organs: OrganMasks, location: str) -> Optional[np.ndarray]:
    """Full-resolution allowed region for one location; None means unconstrained."""
    if location == "right_lung":
        return organs.right_lung.bits
    if location == "left_lung":
        return organs.left_lung.bits
    if location == "lung_unspecified":
        return organs.right_lung.bits | organs.left_lung.bits
    if location in MEDIASTINAL_LOCATIONS:
        return organs.mediastinum.bits
    if location == "other":
        return None
    raise UnknownLocation(f"unknown location {location!r}")


def build_gtruth(pairs, organs: OrganMasks, target, abnormalities: Sequence[str],
                 cfg: DownsampleConfig = DownsampleConfig(), absent_mode: str = "all_forbidden") -> AttentionGroundTruth:
    """Allowed-region grid ``G[M, H, D1, D2]`` for one scan.

    ``pairs`` is an iterable of ``(abnormality, location)`` (or a labels object
    with a ``pairs()`` method). Pairs naming abnormalities outside
    ``abnormalities`` are ignored. Absent rows are all zeros; with
    ``absent_mode="skip"`` they are also excluded via ``rows_included``.
    """
    if absent_mode not in ABSENT_MODES:
        raise ValueError(f"unknown absent mode {absent_mode!r}")
    if hasattr(pairs, "pairs"):
        pairs = pairs.pairs()
    pairs = list(pairs)
    for _, loc in pairs:
        if loc not in LOCATIONS:
            raise UnknownLocation(f"unknown location {loc!r}")
    target = tuple(int(t) for t in target)
    M = len(abnormalities)
    G = np.zeros((M,) + target, dtype=np.uint8)
    present = np.zeros(M, dtype=bool)
    cache = {}
    for m, name in enumerate(abnormalities):
        locs = sorted({loc for a, loc in pairs if a == name})
        if not locs:
            continue
        present[m] = True
        row = np.zeros(target, dtype=bool)
        for loc in locs:
            full = location_mask(organs, loc)
            if full is None:
                row[:] = True
                continue
            if loc not in cache:
                cache[loc] = downsample_mask(full, target, cfg)
            row |= cache[loc]
        G[m] = row
    rows = present if absent_mode == "skip" else np.ones(M, dtype=bool)
    prov = {"algo": cfg.algo, "dilate": cfg.dilate, "threshold": cfg.threshold,
            "heuristic": bool(organs.heuristic), "absent_mode": absent_mode}
    return AttentionGroundTruth(G, rows, prov)


# ---------------------------------------------------------------------------
# Persistence and cache
# ---------------------------------------------------------------------------


def save_gtruth(gt: AttentionGroundTruth, path, extra: Optional[dict] = None):
    """Write ``<stem>.gt.json`` (dims, provenance) and ``<stem>.gt.raw`` (packed bits, C order)."""
    header_path, raw_path = _sidecar_paths(path, "gt")
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": GT_FORMAT,
        "version": 1,
        "dims": list(gt.G.shape),
        "bitorder": "big",
        "rows_included": [bool(x) for x in gt.rows_included],
        "provenance": gt.provenance,
    }
    if extra:
        header.update(extra)
    _atomic_write_bytes(raw_path, np.packbits(gt.G.astype(bool).ravel()).tobytes())
    _atomic_write_bytes(header_path, (json.dumps(header, indent=2, sort_keys=True) + "\n").encode())
    return header_path


def load_gtruth(path) -> AttentionGroundTruth:
    header_path, raw_path = _sidecar_paths(path, "gt")
    header = json.loads(header_path.read_text())
    if header.get("format") != GT_FORMAT:
        raise DimensionMismatch(f"{header_path}: not a {GT_FORMAT} header")
    dims = tuple(int(d) for d in header["dims"])
    n = int(np.prod(dims))
    raw = np.frombuffer(raw_path.read_bytes(), dtype=np.uint8)
    if raw.size != (n + 7) // 8:
        raise PayloadSizeMismatch(f"{raw_path}: expected {(n + 7) // 8} bytes, got {raw.size}")
    G = np.unpackbits(raw, count=n).reshape(dims).astype(np.uint8)
    return AttentionGroundTruth(G, np.array(header["rows_included"], dtype=bool), header.get("provenance", {}))


def gt_cache_key(pairs, organs: OrganMasks, target, abnormalities, cfg: DownsampleConfig, absent_mode: str) -> str:
    """Hash of the config plus the inputs, so a regenerated corpus never hits a stale entry."""
    h = hashlib.sha256()
    h.update(json.dumps({"cfg": asdict(cfg), "target": list(target), "abn": list(abnormalities),
                         "absent_mode": absent_mode, "pairs": sorted(map(list, pairs)),
                         "heuristic": organs.heuristic}, sort_keys=True).encode())
    for m in (organs.right_lung, organs.left_lung, organs.mediastinum):
        h.update(np.packbits(m.bits.ravel()).tobytes())
    return h.hexdigest()[:20]


class GtCache:
    """On-disk cache: ``<root>/<scan_id>/<key>.gt.{json,raw}``."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, scan_id: str, key: str) -> Path:
        return self.root / scan_id / f"{key}.gt.json"

    def get_or_build(self, scan_id: str, pairs, organs: OrganMasks, target, abnormalities,
                     cfg: DownsampleConfig = DownsampleConfig(), absent_mode: str = "all_forbidden"):
        if hasattr(pairs, "pairs"):
            pairs = pairs.pairs()
        pairs = list(pairs)
        key = gt_cache_key(pairs, organs, target, abnormalities, cfg, absent_mode)
        p = self.path(scan_id, key)
        if p.exists():
            return load_gtruth(p), True
        gt = build_gtruth(pairs, organs, target, abnormalities, cfg, absent_mode)
        save_gtruth(gt, p, {"scan_id": scan_id, "key": key})
        return gt, False
