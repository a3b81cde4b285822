"""HiResCAM and 3D Grad-CAM at the head input, plus top-slice ranking and heat-map export.

Score gradients here are arrays of shape ``[H, F, D1, D2]`` holding
``d s_m / d Z`` for one abnormality. Maps are returned raw (no ReLU, no
normalization); only the export helpers rescale for display.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DimensionMismatch
from .mil_head import BodyCamParams, HeadParams, _z, attention_raw, per_slice_scores, slice_weights

METHODS = ("hirescam", "gradcam")


@dataclass(frozen=True, eq=False)
class AttentionMap:
    raw: np.ndarray  # [M, H, D1, D2]
    method: str

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.raw.ndim != 4:
            raise DimensionMismatch(f"attention must be [M,H,D1,D2], got {self.raw.shape}")
        if not np.all(np.isfinite(self.raw)):
            raise ValueError("attention map contains non-finite values")


def _check_index(m, M):
    if not 0 <= m < M:
        raise IndexError(f"abnormality index {m} out of range for M={M}")


def grad_score_wrt_Z(p: HeadParams, m: int, Z=None, mode: str = "mean") -> np.ndarray:
    """``d s_m / d Z`` for the MIL head.

    Mean aggregation gives ``w_m / H`` repeated over every slice group and needs
    no features. Max aggregation puts ``w_m`` on the argmax slice only, so ``Z``
    is required.
    """
    M, F, D1, D2, H = p.dims
    _check_index(m, M)
    w = p.weight_grid()[m]
    if mode == "mean":
        return np.broadcast_to(w / H, (H, F, D1, D2)).copy()
    if Z is None:
        raise ValueError("max aggregation needs Z to locate the argmax slice")
    Z = _z(Z)
    a = slice_weights(per_slice_scores(Z, p), mode)[m]
    return a[:, None, None, None] * w[None]


def bodycam_grad_score_wrt_Z(p: BodyCamParams, m: int, shape) -> np.ndarray:
    H, F, D1, D2 = shape
    W = np.asarray(p.W, dtype=np.float64)
    _check_index(m, W.shape[0])
    return np.broadcast_to((W[m] / (H * D1 * D2))[None, :, None, None], (H, F, D1, D2)).copy()


def _pair(Z, grad):
    Z = _z(Z)
    grad = np.asarray(grad, dtype=np.float64)
    if Z.shape != grad.shape or Z.ndim != 4:
        raise DimensionMismatch(f"gradient {grad.shape} vs features {Z.shape}")
    return Z, grad


def hirescam(Z, grad) -> np.ndarray:
    """Element-wise gradient x feature, summed over channels -> ``[H, D1, D2]``."""
    Z, grad = _pair(Z, grad)
    return (grad * Z).sum(axis=1)


def hirescam_closed_form(Z, p: HeadParams, m: int) -> np.ndarray:
    """HiResCAM of the mean-aggregation head straight from the weights."""
    M, F, D1, D2, H = p.dims
    _check_index(m, M)
    Z = _z(Z)
    if Z.shape != (H, F, D1, D2):
        raise DimensionMismatch(f"features {Z.shape} do not match head dims {(H, F, D1, D2)}")
    return (p.weight_grid()[m][None] * Z).sum(axis=1) / H


def gradcam3d(Z, grad) -> np.ndarray:
    """Channel weights = gradient averaged over ``[H, D1, D2]``; map = weighted channel sum."""
    Z, grad = _pair(Z, grad)
    alpha = grad.mean(axis=(0, 2, 3))
    return np.einsum("f,hfij->hij", alpha, Z)


def attention_map(Z, p: HeadParams, method: str = "hirescam", mode: str = "mean") -> AttentionMap:
    """All-abnormality map ``[M, H, D1, D2]`` for one scan."""
    Z = _z(Z)
    if method == "hirescam":
        return AttentionMap(attention_raw(Z, p, mode), method)
    if method == "gradcam":
        rows = [gradcam3d(Z, grad_score_wrt_Z(p, m, Z, mode)) for m in range(p.M)]
        return AttentionMap(np.stack(rows), method)
    raise ValueError(f"unknown method {method!r}")


def top_slices(C: np.ndarray, m: int, k: int) -> list:
    """Indices of the ``k`` highest slice scores for abnormality ``m``; ties go to the lower index."""
    C = np.asarray(C)
    H = C.shape[1]
    _check_index(m, C.shape[0])
    if not 0 <= k <= H:
        raise ValueError(f"k={k} exceeds the number of slice groups H={H}")
    order = np.lexsort((np.arange(H), -C[m]))
    return [int(i) for i in order[:k]]


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def normalize_for_display(row: np.ndarray) -> np.ndarray:
    """Min-max rescale one abnormality's map to [0, 1]; a constant map becomes all zeros."""
    lo, hi = float(row.min()), float(row.max())
    if hi <= lo:
        return np.zeros_like(row, dtype=np.float64)
    return (row - lo) / (hi - lo)


def write_pgm(path, img: np.ndarray):
    """Binary 8-bit PGM from values in [0, 1]."""
    data = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def export_heatmaps(out_dir, scan_id: str, m: int, raw_row: np.ndarray, volume: Optional[np.ndarray] = None):
    """Write per-slice-group PGMs and the raw-value CSV for one (scan, abnormality).

    ``heat_hXXX.pgm`` is the normalized map upsampled to slice resolution;
    ``overlay_hXXX.pgm`` blends it 50/50 with the slice group's mean intensity
    when ``volume`` is given. The CSV holds the raw values at full precision.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    H, D1, D2 = raw_row.shape
    norm = normalize_for_display(raw_row)
    written = []
    for h in range(H):
        heat = norm[h]
        if volume is not None:
            g = volume.shape[0] // H
            fy, fx = volume.shape[1] // D1, volume.shape[2] // D2
            heat_up = np.kron(heat, np.ones((fy, fx)))
            base = volume[h * g : (h + 1) * g].mean(axis=0)
            write_pgm(out_dir / f"heat_h{h:03d}.pgm", heat_up)
            write_pgm(out_dir / f"overlay_h{h:03d}.pgm", 0.5 * base + 0.5 * heat_up)
            written.append(out_dir / f"overlay_h{h:03d}.pgm")
        else:
            write_pgm(out_dir / f"heat_h{h:03d}.pgm", heat)
        written.append(out_dir / f"heat_h{h:03d}.pgm")
    csv_path = out_dir / "raw_values.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scan_id", "m", "h", "d1", "d2", "value"])
        for (h, i, j), v in np.ndenumerate(raw_row):
            w.writerow([scan_id, m, h, i, j, repr(float(v))])
    written.append(csv_path)
    return written


def read_raw_values_csv(path) -> dict:
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out[(row["scan_id"], int(row["m"]), int(row["h"]), int(row["d1"]), int(row["d2"]))] = float(row["value"])
    return out
