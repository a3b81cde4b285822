"""Independent reference computations shared by the test modules."""

import numpy as np

from ctexplain.mil_head import HeadParams, total_loss


def central_diff_grad(Z, p, y, G=None, lam=0.0, mode="mean", rows=None, kind="log", eps=1e-4):
    """Central finite differences of total_loss in every parameter of W and b."""
    def f(W, b):
        return total_loss(Z, HeadParams(W, b, p.dims), y, G, lam, mode, rows, kind)

    gW = np.zeros_like(p.W)
    for idx in np.ndindex(p.W.shape):
        Wp, Wm = p.W.copy(), p.W.copy()
        Wp[idx] += eps
        Wm[idx] -= eps
        gW[idx] = (f(Wp, p.b) - f(Wm, p.b)) / (2 * eps)
    gb = np.zeros_like(p.b)
    for i in range(p.b.size):
        bp, bm = p.b.copy(), p.b.copy()
        bp[i] += eps
        bm[i] -= eps
        gb[i] = (f(p.W, bp) - f(p.W, bm)) / (2 * eps)
    return gW, gb


def max_rel_err(analytic, numeric, floor=1e-6):
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def loop_scores(Z, p):
    """Per-slice scores by explicit loops over (m, h, f, d1, d2)."""
    M, F, D1, D2, H = p.dims
    C = np.zeros((M, H))
    for m in range(M):
        for h in range(H):
            acc = p.b[m]
            k = 0
            for f in range(F):
                for i in range(D1):
                    for j in range(D2):
                        acc += p.W[m, k] * Z[h, f, i, j]
                        k += 1
            C[m, h] = acc
    return C


def flood_fill_labels(mask, connectivity=26):
    """Breadth-first component labeling; returns a list of voxel sets."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    offs = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1) if (a, b, c) != (0, 0, 0)]
    if connectivity == 6:
        offs = [o for o in offs if sum(map(abs, o)) == 1]
    comps = []
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        comp, stack = set(), [start]
        seen[start] = True
        while stack:
            v = stack.pop()
            comp.add(v)
            for o in offs:
                w = (v[0] + o[0], v[1] + o[1], v[2] + o[2])
                if all(0 <= w[k] < mask.shape[k] for k in range(3)) and mask[w] and not seen[w]:
                    seen[w] = True
                    stack.append(w)
        comps.append(frozenset(comp))
    return comps


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else (0.5 if a == b else 0.0)
    return total / (len(pos) * len(neg))


# Worked examples of the labeler: sentence -> expected (abnormality, location) pairs
GOLDEN_SENTENCES = [
    ("the heart is enlarged without pericardial effusion", {("cardiomegaly", "heart")}),
    ("there is a nodule in the right upper lobe", {("nodule", "right_lung")}),
    ("left pneumonia", {("pneumonia", "left_lung")}),
    ("calcifications in the aorta", {("calcification", "great_vessel")}),
    ("a calcified granuloma is visible in the apex of the left lung",
     {("calcification", "left_lung"), ("granuloma", "left_lung")}),
    ("the catheter tip is visible in the SVC", {("catheter_or_port", "great_vessel")}),
    ("The lungs are clear", set()),
    ("The consolidation has resolved", set()),
]


def iou_boundary_case(kind):
    """One positive scan on a [1, 2, 2, 2] grid: (attention, G) for the three hand-counted cases."""
    G = np.zeros((1, 2, 2, 2), dtype=np.uint8)
    G[0, 0] = 1  # four allowed cells in slice 0, four forbidden in slice 1
    attn = np.zeros((1, 2, 2, 2))
    if kind == "all_allowed":
        attn[0, 0] = 0.9
    elif kind == "all_forbidden":
        attn[0, 1] = 0.9
    elif kind == "three_in_one_out":
        attn[0, 0].flat[:3] = 0.9
        attn[0, 1, 0, 0] = 0.9
    else:
        raise ValueError(kind)
    return attn, G


def divergence_witness():
    """Head whose weights flip sign across the width axis; features positive everywhere."""
    p = HeadParams(np.array([[1.0, -2.0]]), np.zeros(1), (1, 1, 1, 2, 1))
    Z = np.ones((1, 1, 1, 2))
    return p, Z
