"""Evaluation: OrganIoU with per-abnormality threshold selection, AUROC, per-slice score summaries."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(21))
WEIGHTINGS = ("count", "value")


def squash(raw: np.ndarray) -> np.ndarray:
    """Map raw attention to (0, 1) with a logistic sigmoid."""
    raw = np.asarray(raw, dtype=np.float64)
    out = np.empty_like(raw)
    pos = raw >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-raw[pos]))
    e = np.exp(raw[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# OrganIoU
# ---------------------------------------------------------------------------


@dataclass
class OrganIoUResult:
    names: tuple
    iou: list  # per abnormality, None when undefined (no positive scans)
    threshold: list  # chosen t* per abnormality, None when undefined
    mean: float


def _allowed_forbidden(attn, G, positive, m, thresholds, weighting):
    """Summed (allowed, forbidden) per threshold over the positive scans for abnormality ``m``."""
    t = np.asarray(thresholds, dtype=np.float64)
    allowed = np.zeros(t.size)
    forbidden = np.zeros(t.size)
    for a, g, pos in zip(attn, G, positive):
        if not pos[m]:
            continue
        a_m = np.asarray(a[m], dtype=np.float64).ravel()
        g_m = np.asarray(g[m]).ravel().astype(bool)
        on = a_m[None, :] > t[:, None]
        w = on if weighting == "count" else on * a_m[None, :]
        allowed += (w * g_m).sum(axis=1)
        forbidden += (w * ~g_m).sum(axis=1)
    return allowed, forbidden


def _ratio(allowed, forbidden):
    denom = allowed + forbidden
    return np.divide(allowed, denom, out=np.zeros_like(allowed), where=denom > 0)


def organ_iou(
    attn_val: Sequence[np.ndarray],
    G_val: Sequence[np.ndarray],
    positive_val: Sequence[np.ndarray],
    attn_test: Sequence[np.ndarray],
    G_test: Sequence[np.ndarray],
    positive_test: Sequence[np.ndarray],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    names: Optional[Sequence[str]] = None,
    weighting: str = "count",
) -> OrganIoUResult:
    """Per-abnormality OrganIoU on the test scans at the threshold that is best on validation.

    ``attn_*`` hold squashed maps ``[M, H, D1, D2]`` in [0, 1], ``G_*`` the
    matching allowed-region grids and ``positive_*`` boolean ``[M]`` label
    vectors. A map element is "on" when it strictly exceeds the threshold.
    Allowed and forbidden counts are pooled over the positive scans of each
    split; an empty binarization scores 0. Ties in the threshold search go to
    the lowest threshold.
    """
    if len(thresholds) == 0:
        raise ValueError("threshold grid is empty")
    if weighting not in WEIGHTINGS:
        raise ValueError(f"unknown weighting {weighting!r}")
    for a, g in zip(list(attn_val) + list(attn_test), list(G_val) + list(G_test)):
        if np.shape(a) != np.shape(g):
            raise ValueError(f"attention {np.shape(a)} does not match G {np.shape(g)}")
        if np.size(a) and (np.min(a) < 0.0 or np.max(a) > 1.0):
            raise ValueError("OrganIoU expects squashed attention in [0, 1]")
    M = np.shape(attn_test[0])[0] if len(attn_test) else np.shape(attn_val[0])[0]
    names = tuple(names) if names is not None else tuple(str(m) for m in range(M))
    ious, ts = [], []
    for m in range(M):
        if not any(p[m] for p in positive_test):
            ious.append(None)
            ts.append(None)
            continue
        a_v, f_v = _allowed_forbidden(attn_val, G_val, positive_val, m, thresholds, weighting)
        k = int(np.argmax(_ratio(a_v, f_v)))
        a_t, f_t = _allowed_forbidden(attn_test, G_test, positive_test, m, [thresholds[k]], weighting)
        ious.append(float(_ratio(a_t, f_t)[0]))
        ts.append(float(thresholds[k]))
    defined = [x for x in ious if x is not None]
    if not defined:
        raise ValueError("no abnormality has a positive test scan; mean OrganIoU is undefined")
    return OrganIoUResult(names, ious, ts, float(np.mean(defined)))


# ---------------------------------------------------------------------------
# AUROC
# ---------------------------------------------------------------------------


@dataclass
class AurocResult:
    names: tuple
    auroc: list  # None when the class distribution is degenerate
    median: float


def auroc_binary(scores, labels) -> Optional[float]:
    """Mann-Whitney AUROC; tied pairs count one half. None if a class is missing."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        return None
    ranks = rankdata(s)  # average ranks implement the one-half tie rule
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def auroc(scores, labels, names: Optional[Sequence[str]] = None) -> AurocResult:
    """Per-abnormality AUROC for ``[N, M]`` scores and labels, plus the median over defined ones."""
    S = np.asarray(scores, dtype=np.float64)
    Y = np.asarray(labels)
    if S.ndim == 1:
        S, Y = S[:, None], Y[:, None]
    if S.shape != Y.shape:
        raise ValueError(f"scores {S.shape} and labels {Y.shape} differ in shape")
    names = tuple(names) if names is not None else tuple(str(m) for m in range(S.shape[1]))
    vals = [auroc_binary(S[:, m], Y[:, m]) for m in range(S.shape[1])]
    for n, v in zip(names, vals):
        if v is None:
            log.warning("AUROC undefined for %s: needs both positive and negative scans", n)
    defined = [v for v in vals if v is not None]
    return AurocResult(names, vals, float(np.median(defined)) if defined else math.nan)


# ---------------------------------------------------------------------------
# Per-slice score summaries
# ---------------------------------------------------------------------------


@dataclass
class SliceScoreSummary:
    # rows of (abnormality, h, group, n, mean, ci_half_width)
    rows: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def curve(self, abnormality: str, group: str):
        pts = [(h, mu, ci) for a, h, g, _, mu, ci in self.rows if a == abnormality and g == group]
        pts.sort()
        return np.array([p[1] for p in pts]), np.array([p[2] for p in pts])


def summarize_slice_scores(C, labels, names: Optional[Sequence[str]] = None) -> SliceScoreSummary:
    """Mean and 95% CI (1.96 sd / sqrt(n)) of slice scores per index, for present vs absent scans.

    ``C`` is ``[N, M, H]``; ``labels`` is ``[N, M]``. Abnormalities with fewer
    than two scans in either group are skipped with a warning.
    """
    C = np.asarray(C, dtype=np.float64)
    Y = np.asarray(labels).astype(bool)
    N, M, H = C.shape
    names = tuple(names) if names is not None else tuple(str(m) for m in range(M))
    out = SliceScoreSummary()
    for m in range(M):
        groups = {"present": C[Y[:, m], m], "absent": C[~Y[:, m], m]}
        small = {g: v.shape[0] for g, v in groups.items() if v.shape[0] < 2}
        if small:
            log.warning("skipping %s in slice-score summary: group sizes %s < 2", names[m], small)
            out.skipped.append(names[m])
            continue
        for g, v in groups.items():
            n = v.shape[0]
            mu = v.mean(axis=0)
            half = 1.96 * v.std(axis=0, ddof=1) / math.sqrt(n)
            for h in range(H):
                out.rows.append((names[m], h, g, n, float(mu[h]), float(half[h])))
    return out


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def _fmt(x):
    return "" if x is None else repr(float(x))


def write_iou_csv(path, results: dict):
    """``results`` maps a label (e.g. ``"lambda=0/hirescam"``) to an :class:`OrganIoUResult`."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run", "abnormality", "threshold", "organ_iou"])
        for run, r in results.items():
            for n, t, v in zip(r.names, r.threshold, r.iou):
                w.writerow([run, n, _fmt(t), _fmt(v)])
            w.writerow([run, "MEAN", "", _fmt(r.mean)])


def write_auroc_csv(path, results: dict):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run", "abnormality", "auroc"])
        for run, r in results.items():
            for n, v in zip(r.names, r.auroc):
                w.writerow([run, n, _fmt(v)])
            w.writerow([run, "MEDIAN", _fmt(r.median)])


def write_slice_summary_csv(path, summary: SliceScoreSummary):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["abnormality", "h", "group", "n", "mean", "ci95_half_width"])
        for a, h, g, n, mu, ci in summary.rows:
            w.writerow([a, h, g, n, repr(mu), repr(ci)])
