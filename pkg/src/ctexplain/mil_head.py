"""Multiple-instance classification head over per-slice feature maps.

A fully connected layer shared across slice groups scores every slice group
(``C[m, h] = w_m . flat(z_h) + b_m``); slice scores are averaged (or max-pooled)
into a volume score. Gradients are written out by hand; the mask-loss term uses
the closed-form HiResCAM map of this head, so training and explanation share a
single code path.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatch, NonFiniteValues, NumericOverflow, PayloadSizeMismatch

logger = logging.getLogger(__name__)

AGGREGATIONS = ("mean", "max")
ABSENT_MODES = ("all_forbidden", "skip")
MASK_KINDS = ("log", "l2")


@dataclass(frozen=True, eq=False)
class HeadParams:
    W: np.ndarray  # [M, F*D1*D2], flattened in [f, d1, d2] row-major order
    b: np.ndarray  # [M]
    dims: tuple  # (M, F, D1, D2, H)

    def __post_init__(self):
        M, F, D1, D2, _ = self.dims
        W = np.asarray(self.W, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if W.shape != (M, F * D1 * D2) or b.shape != (M,):
            raise DimensionMismatch(f"W {W.shape} / b {b.shape} do not match dims {self.dims}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise NonFiniteValues("head parameters must be finite")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def M(self):
        return self.dims[0]

    def weight_grid(self) -> np.ndarray:
        """W reshaped to ``[M, F, D1, D2]``."""
        M, F, D1, D2, _ = self.dims
        return self.W.reshape(M, F, D1, D2)

    @classmethod
    def init(cls, M, F, D1, D2, H, seed=0, scale=0.01):
        rng = np.random.default_rng(seed)
        W = rng.uniform(-scale, scale, size=(M, F * D1 * D2))
        return cls(W, np.zeros(M), (M, F, D1, D2, H))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.99
    lam: float = 1.0 / 3.0
    epochs: int = 30
    batch_size: int = 1
    aggregation: str = "mean"
    absent_mode: str = "all_forbidden"
    mask_kind: str = "log"
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.absent_mode not in ABSENT_MODES:
            raise ValueError(f"absent_mode must be one of {ABSENT_MODES}")
        if self.mask_kind not in MASK_KINDS:
            raise ValueError(f"mask_kind must be one of {MASK_KINDS}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def _z(Z) -> np.ndarray:
    return np.asarray(getattr(Z, "values", Z), dtype=np.float64)


def _check_dims(Z: np.ndarray, p: HeadParams):
    M, F, D1, D2, _ = p.dims
    if Z.ndim != 4 or Z.shape[1:] != (F, D1, D2):
        raise DimensionMismatch(f"feature stack {Z.shape} does not match head dims (F, D1, D2)={(F, D1, D2)}")


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def per_slice_scores(Z, p: HeadParams) -> np.ndarray:
    """Slice-score matrix ``C`` of shape ``[M, H]``."""
    Z = _z(Z)
    _check_dims(Z, p)
    X = Z.reshape(Z.shape[0], -1)
    return p.W @ X.T + p.b[:, None]


def slice_weights(C: np.ndarray, mode: str = "mean") -> np.ndarray:
    """d s_m / d C[m, h]: ``1/H`` everywhere for mean, one-hot at the argmax for max.

    ``np.argmax`` returns the first maximal index, which is the tie-break.
    """
    M, H = C.shape
    if mode == "mean":
        return np.full((M, H), 1.0 / H)
    if mode == "max":
        a = np.zeros((M, H))
        a[np.arange(M), np.argmax(C, axis=1)] = 1.0
        return a
    raise ValueError(f"unknown aggregation {mode!r}")


@dataclass(frozen=True, eq=False)
class VolumeScores:
    s: np.ndarray
    yhat: np.ndarray


def aggregate(C: np.ndarray, mode: str = "mean") -> VolumeScores:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[1] < 1:
        raise DimensionMismatch(f"slice scores must be [M, H>=1], got {C.shape}")
    if mode == "mean":
        s = C.mean(axis=1)
    elif mode == "max":
        s = C.max(axis=1)
    else:
        raise ValueError(f"unknown aggregation {mode!r}")
    return VolumeScores(s, expit(s))


def classification_loss(scores, y) -> float:
    """Mean binary cross-entropy over labels, evaluated from logits."""
    s = scores.s if isinstance(scores, VolumeScores) else np.asarray(scores, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if s.shape != y.shape:
        raise DimensionMismatch(f"scores {s.shape} vs labels {y.shape}")
    return float(np.mean(np.logaddexp(0.0, s) - y * s))


def attention_raw(Z, p: HeadParams, mode: str = "mean", C: Optional[np.ndarray] = None) -> np.ndarray:
    """Raw HiResCAM maps ``[M, H, D1, D2]`` of this head.

    For mean aggregation this is ``(1/H) sum_f w_m[f] * Z[h, f]``.
    """
    Z = _z(Z)
    _check_dims(Z, p)
    if C is None:
        C = per_slice_scores(Z, p)
    a = slice_weights(C, mode)
    contrib = np.einsum("mfij,hfij->mhij", p.weight_grid(), Z)
    return a[:, :, None, None] * contrib


def _forbidden(G: np.ndarray, rows_included: Optional[np.ndarray]) -> np.ndarray:
    forb = np.asarray(G) == 0
    if rows_included is not None:
        forb = forb & np.asarray(rows_included, dtype=bool)[:, None, None, None]
    return forb


def mask_loss(raw: np.ndarray, G: np.ndarray, rows_included=None, kind: str = "log") -> float:
    """Penalty on squashed attention placed where ``G == 0``.

    Attention is squashed with a sigmoid, so ``-log(1 - a)`` equals
    ``softplus(raw)``. ``kind="l2"`` sums ``a**2`` instead.
    """
    raw = np.asarray(raw, dtype=np.float64)
    G = np.asarray(G)
    if raw.shape != G.shape:
        raise DimensionMismatch(f"attention {raw.shape} vs ground truth {G.shape}")
    forb = _forbidden(G, rows_included)
    if kind == "log":
        return float(np.logaddexp(0.0, raw[forb]).sum())
    if kind == "l2":
        return float((expit(raw[forb]) ** 2).sum())
    raise ValueError(f"unknown mask loss kind {kind!r}")


@dataclass(frozen=True, eq=False)
class LossParts:
    total: float
    cls: float
    mask: float


def loss_parts(Z, p, y, G=None, lam=0.0, mode="mean", rows_included=None, kind="log") -> LossParts:
    C = per_slice_scores(Z, p)
    cls = classification_loss(aggregate(C, mode), y)
    mask = 0.0
    if G is not None:
        mask = mask_loss(attention_raw(Z, p, mode, C), G, rows_included, kind)
    return LossParts(cls + lam * mask, cls, mask)


def total_loss(Z, p, y, G=None, lam=1.0 / 3.0, mode="mean", rows_included=None, kind="log") -> float:
    return loss_parts(Z, p, y, G, lam, mode, rows_included, kind).total


# ---------------------------------------------------------------------------
# Gradients and optimizer
# ---------------------------------------------------------------------------


def grad_params(Z, p: HeadParams, y, G=None, lam=0.0, mode="mean", rows_included=None, kind="log"):
    """Analytic ``(dL/dW, dL/db)`` of :func:`total_loss`.

    Max aggregation uses the subgradient that routes everything through the
    argmax slice.
    """
    Z = _z(Z)
    y = np.asarray(y, dtype=np.float64)
    M = p.M
    C = per_slice_scores(Z, p)
    a = slice_weights(C, mode)
    s = (a * C).sum(axis=1)
    dLds = (expit(s) - y) / M
    X = Z.reshape(Z.shape[0], -1)
    gW = (dLds[:, None] * a) @ X
    gb = dLds * a.sum(axis=1)

    if G is not None and lam != 0.0:
        contrib = np.einsum("mfij,hfij->mhij", p.weight_grid(), Z)
        raw = a[:, :, None, None] * contrib
        if raw.shape != np.shape(G):
            raise DimensionMismatch(f"attention {raw.shape} vs ground truth {np.shape(G)}")
        sig = expit(raw)
        if kind == "log":
            draw = sig
        elif kind == "l2":
            draw = 2.0 * sig * sig * (1.0 - sig)
        else:
            raise ValueError(f"unknown mask loss kind {kind!r}")
        coef = draw * _forbidden(G, rows_included) * a[:, :, None, None]
        gW = gW + lam * np.einsum("mhij,hfij->mfij", coef, Z).reshape(M, -1)

    if not (np.all(np.isfinite(gW)) and np.all(np.isfinite(gb))):
        raise NumericOverflow("non-finite gradient")
    return gW, gb


def sgd_step(p: HeadParams, grads, velocity, cfg: TrainConfig):
    """Classical momentum: ``v <- mu v - lr g``; ``theta <- theta + v``."""
    gW, gb = grads
    vW, vb = velocity
    vW = cfg.momentum * vW - cfg.lr * gW
    vb = cfg.momentum * vb - cfg.lr * gb
    new = HeadParams(p.W + vW, p.b + vb, p.dims)
    return new, (vW, vb)


def zero_velocity(p: HeadParams):
    return np.zeros_like(p.W), np.zeros_like(p.b)


# ---------------------------------------------------------------------------
# BodyCAM head: global average pooling over [H, D1, D2] followed by one FC layer
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BodyCamParams:
    W: np.ndarray  # [M, F]
    b: np.ndarray  # [M]


def bodycam_forward(Z, p: BodyCamParams) -> VolumeScores:
    Z = _z(Z)
    W = np.asarray(p.W, dtype=np.float64)
    if Z.ndim != 4 or W.ndim != 2 or W.shape[1] != Z.shape[1]:
        raise DimensionMismatch(f"BodyCAM weights {W.shape} do not match features {Z.shape}")
    gap = Z.mean(axis=(0, 2, 3))
    s = W @ gap + np.asarray(p.b, dtype=np.float64)
    return VolumeScores(s, expit(s))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrainItem:
    scan_id: str
    Z: np.ndarray  # [H, F, D1, D2]
    y: np.ndarray  # [M]
    G: Optional[np.ndarray] = None  # [M, H, D1, D2]
    rows_included: Optional[np.ndarray] = None  # [M]


@dataclass
class TrainHistory:
    # index 0 is the untrained model; index e is after epoch e
    total: list = field(default_factory=list)
    cls: list = field(default_factory=list)
    mask: list = field(default_factory=list)


def _item_rows(item: TrainItem, cfg: TrainConfig):
    if cfg.absent_mode == "skip":
        return np.asarray(item.y) > 0 if item.rows_included is None else item.rows_included
    return item.rows_included


def _item_grad(item: TrainItem, p: HeadParams, cfg: TrainConfig):
    return grad_params(item.Z, p, item.y, item.G, cfg.lam, cfg.aggregation, _item_rows(item, cfg), cfg.mask_kind)


def _item_loss(item: TrainItem, p: HeadParams, cfg: TrainConfig) -> LossParts:
    return loss_parts(item.Z, p, item.y, item.G, cfg.lam, cfg.aggregation, _item_rows(item, cfg), cfg.mask_kind)


def _map(pool, fn, items):
    if pool is None:
        return [fn(it) for it in items]
    return list(pool.map(fn, items))


def dataset_loss(items: Sequence[TrainItem], p: HeadParams, cfg: TrainConfig, pool=None) -> LossParts:
    parts = _map(pool, lambda it: _item_loss(it, p, cfg), sorted(items, key=lambda it: it.scan_id))
    n = len(parts)
    return LossParts(
        sum(x.total for x in parts) / n, sum(x.cls for x in parts) / n, sum(x.mask for x in parts) / n
    )


def train(items: Sequence[TrainItem], cfg: TrainConfig, init: Optional[HeadParams] = None, threads: int = 1):
    """Minibatch SGD with momentum.

    Per-scan gradients may be computed on worker threads; they are always
    reduced in sorted scan-id order so results do not depend on ``threads``.
    Returns ``(params, velocity, history)``.
    """
    if not items:
        raise ValueError("no training items")
    H, F, D1, D2 = items[0].Z.shape
    M = len(items[0].y)
    p = init if init is not None else HeadParams.init(M, F, D1, D2, H, seed=cfg.seed)
    vel = zero_velocity(p)
    rng = np.random.default_rng(cfg.seed)
    hist = TrainHistory()
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        def record():
            lp = dataset_loss(items, p, cfg, pool)
            if not np.isfinite(lp.total):
                raise NumericOverflow("training loss became non-finite")
            hist.total.append(lp.total)
            hist.cls.append(lp.cls)
            hist.mask.append(lp.mask)

        record()
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(items))
            for start in range(0, len(order), cfg.batch_size):
                batch = sorted((items[i] for i in order[start : start + cfg.batch_size]), key=lambda it: it.scan_id)
                grads = _map(pool, lambda it: _item_grad(it, p, cfg), batch)
                gW = np.zeros_like(p.W)
                gb = np.zeros_like(p.b)
                for w, b in grads:
                    gW += w
                    gb += b
                p, vel = sgd_step(p, (gW / len(batch), gb / len(batch)), vel, cfg)
            record()
            logger.debug("epoch %d: total=%.5f cls=%.5f mask=%.5f", epoch + 1, hist.total[-1], hist.cls[-1], hist.mask[-1])
    finally:
        if pool is not None:
            pool.shutdown()
    return p, vel, hist


# ---------------------------------------------------------------------------
# Checkpoints: JSON header + little-endian float32 payload (W, b, vW, vb)
# ---------------------------------------------------------------------------


def save_checkpoint(path, p: HeadParams, velocity=None, seed: int = 0, steps: int = 0, extra: Optional[dict] = None):
    path = Path(path)
    stem = path.name.removesuffix(".ckpt.json")
    header_path = path.with_name(stem + ".ckpt.json")
    raw_path = path.with_name(stem + ".ckpt.raw")
    header_path.parent.mkdir(parents=True, exist_ok=True)
    vW, vb = velocity if velocity is not None else zero_velocity(p)
    with np.errstate(over="ignore"):
        payload = np.concatenate([p.W.ravel(), p.b, np.ravel(vW), np.ravel(vb)]).astype("<f4")
    if not np.all(np.isfinite(payload)):
        raise NumericOverflow("parameters overflow the float32 checkpoint payload")
    header = {
        "format": "ctexplain-head",
        "version": 1,
        "dims": dict(zip(("M", "F", "D1", "D2", "H"), p.dims)),
        "seed": int(seed),
        "steps": int(steps),
        "dtype": "float32",
        "byte_order": "little",
        "layout": ["W", "b", "velocity_W", "velocity_b"],
    }
    if extra:
        header.update(extra)
    for target, data in ((raw_path, payload.tobytes()), (header_path, (json.dumps(header, indent=2) + "\n").encode())):
        tmp = target.with_name(target.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, target)
    return header_path


def load_checkpoint(path):
    """Returns ``(params, velocity, header)``."""
    path = Path(path)
    stem = path.name.removesuffix(".ckpt.json").removesuffix(".ckpt.raw")
    header = json.loads(path.with_name(stem + ".ckpt.json").read_text())
    d = header["dims"]
    dims = (d["M"], d["F"], d["D1"], d["D2"], d["H"])
    M, K = dims[0], dims[1] * dims[2] * dims[3]
    raw = np.frombuffer(path.with_name(stem + ".ckpt.raw").read_bytes(), dtype="<f4").astype(np.float64)
    if raw.size != 2 * (M * K + M):
        raise PayloadSizeMismatch(f"checkpoint payload has {raw.size} values, expected {2 * (M * K + M)}")
    W, b = raw[: M * K].reshape(M, K), raw[M * K : M * K + M]
    vW, vb = raw[M * K + M : 2 * M * K + M].reshape(M, K), raw[2 * M * K + M :]
    return HeadParams(W, b, dims), (vW, vb), header
