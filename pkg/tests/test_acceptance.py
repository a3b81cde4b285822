"""Acceptance suite: every criterion at its stated tolerance, one summary line each."""

import dataclasses
import time

import numpy as np
import pytest

from conftest import random_head, record_criterion
from oracles import (
    GOLDEN_SENTENCES,
    central_diff_grad,
    divergence_witness,
    iou_boundary_case,
    max_rel_err,
)
from ctexplain import experiment as ex
from ctexplain.cli import main
from ctexplain.evalx import auroc_binary, organ_iou
from ctexplain.explain import (
    bodycam_grad_score_wrt_Z,
    grad_score_wrt_Z,
    gradcam3d,
    hirescam,
    hirescam_closed_form,
)
from ctexplain.gt_builder import DownsampleConfig, downsample_mask
from ctexplain.mil_head import (
    BodyCamParams,
    HeadParams,
    aggregate,
    attention_raw,
    grad_params,
    mask_loss,
    per_slice_scores,
)
from ctexplain.organ_seg import segment_lungs, split_left_right
from ctexplain.report_labeler import label_report
from ctexplain.volgrid import PhantomSpec, generate_phantom

N_INSTANCES = 120
SEEDS = (0, 1, 2, 3, 4)


def instances(base_seed, n=N_INSTANCES, **kw):
    rng = np.random.default_rng(base_seed)
    return [random_head(rng, **kw) for _ in range(n)]


@pytest.fixture(scope="module")
def seed_runs(tmp_path_factory):
    """Default-config experiment per seed -> (summary, seconds, config)."""
    out = {}
    root = tmp_path_factory.mktemp("acceptance")
    for seed in SEEDS:
        cfg = dataclasses.replace(ex.ExperimentConfig(), seed=seed, out_dir=str(root / f"seed{seed}"))
        t0 = time.perf_counter()
        summary = ex.run_experiment(cfg, threads=4)
        out[seed] = (summary, time.perf_counter() - t0, cfg)
    return out


# ---------------------------------------------------------------------------
# 1-4: head and explanation identities
# ---------------------------------------------------------------------------


def test_criterion_01_faithfulness_identity():
    t0 = time.perf_counter()
    worst = 0.0
    for p, Z in instances(101, scale=2.0):
        s = aggregate(per_slice_scores(Z, p)).s
        for m in range(p.M):
            worst = max(worst, abs(hirescam_closed_form(Z, p, m).sum() - (s[m] - p.b[m])))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 5.0
    record_criterion(1, "faithfulness identity", ok, f"max |sum - (s-b)| = {worst:.2e} over {N_INSTANCES} heads, {elapsed:.2f}s")
    assert ok


def test_criterion_02_path_equivalence():
    worst = 0.0
    for p, Z in instances(101, scale=2.0):
        for m in range(p.M):
            diff = hirescam_closed_form(Z, p, m) - hirescam(Z, grad_score_wrt_Z(p, m))
            worst = max(worst, float(np.max(np.abs(diff))))
    ok = worst <= 1e-12
    record_criterion(2, "path equivalence", ok, f"max abs diff = {worst:.2e}")
    assert ok


def test_criterion_03_cam_equivalence_and_divergence():
    rng = np.random.default_rng(103)
    worst = 0.0
    for _ in range(N_INSTANCES):
        H, F, D1, D2 = (int(x) for x in rng.integers(1, 5, size=4))
        M = int(rng.integers(1, 4))
        p = BodyCamParams(rng.normal(size=(M, F)), rng.normal(size=M))
        Z = rng.normal(size=(H, F, D1, D2))
        for m in range(M):
            g = bodycam_grad_score_wrt_Z(p, m, Z.shape)
            worst = max(worst, float(np.max(np.abs(gradcam3d(Z, g) - hirescam(Z, g)))))
    wp, wZ = divergence_witness()
    g = grad_score_wrt_Z(wp, 0)
    disagree = int(np.sum(np.sign(gradcam3d(wZ, g)) != np.sign(hirescam(wZ, g))))
    ok = worst <= 1e-12 and disagree >= 1
    record_criterion(3, "CAM equivalence", ok, f"BodyCAM max diff = {worst:.2e}; witness sign disagreements = {disagree}")
    assert ok


def _mask_only_fd(Z, p, G, rows, eps=1e-4):
    def f(W):
        return mask_loss(attention_raw(Z, HeadParams(W, p.b, p.dims)), G, rows)

    gW = np.zeros_like(p.W)
    for idx in np.ndindex(p.W.shape):
        Wp, Wm = p.W.copy(), p.W.copy()
        Wp[idx] += eps
        Wm[idx] -= eps
        gW[idx] = (f(Wp) - f(Wm)) / (2 * eps)
    return gW


def test_criterion_04_gradient_correctness():
    worst = {"class": 0.0, "mask/all_forbidden": 0.0, "mask/skip": 0.0, "total": 0.0}
    for k, (p, Z) in enumerate(instances(104, scale=0.5)):
        rng = np.random.default_rng([104, k])
        y = rng.integers(0, 2, size=p.M).astype(float)
        G = (rng.random((p.M, Z.shape[0]) + Z.shape[2:]) > 0.4).astype(np.uint8)
        ana = grad_params(Z, p, y)
        worst["class"] = max(worst["class"], max_rel_err(ana, central_diff_grad(Z, p, y)))
        for mode, rows in (("all_forbidden", None), ("skip", y > 0)):
            full = grad_params(Z, p, y, G, 1.0, rows_included=rows)[0] - ana[0]
            err = max_rel_err([full], [_mask_only_fd(Z, p, G, rows)])
            worst[f"mask/{mode}"] = max(worst[f"mask/{mode}"], err)
        tot = grad_params(Z, p, y, G, 1 / 3)
        worst["total"] = max(worst["total"], max_rel_err(tot, central_diff_grad(Z, p, y, G, 1 / 3)))
    ok = all(v <= 1e-5 for v in worst.values())
    record_criterion(4, "gradient correctness", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


# ---------------------------------------------------------------------------
# 5: mask-loss localization gain on the phantom corpus
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_05_mask_loss_improves_organ_iou(seed_runs):
    gains, times = [], []
    for seed in SEEDS:
        summary, seconds, _ = seed_runs[seed]
        rows = {r["model"]: r for r in summary["table"]}
        gains.append(rows["lambda=0.3333"]["hirescam_organ_iou"] - rows["lambda=0.0000"]["hirescam_organ_iou"])
        times.append(seconds)
    wins = sum(g >= 0.10 for g in gains)
    ok = wins >= 4 and max(times) < 300.0
    record_criterion(5, "mask-loss OrganIoU gain", ok,
                     f"HiResCAM gains {[round(g, 3) for g in gains]}, {wins}/5 seeds >= 0.10, max {max(times):.1f}s/seed")
    assert ok


# ---------------------------------------------------------------------------
# 6-8: labeler, segmentation, downsampling
# ---------------------------------------------------------------------------


def test_criterion_06_report_labeler_golden():
    bad = [s for s, expected in GOLDEN_SENTENCES if set(label_report([s]).pairs()) != expected]
    union = set().union(*(e for _, e in GOLDEN_SENTENCES))
    whole = set(label_report([s for s, _ in GOLDEN_SENTENCES]).pairs()) == union
    ok = not bad and whole
    record_criterion(6, "report labeler golden rows", ok, f"{len(GOLDEN_SENTENCES) - len(bad)}/{len(GOLDEN_SENTENCES)} rows exact, combined report exact: {whole}")
    assert ok


@pytest.mark.slow
def test_criterion_07_segmentation_fidelity(seed_runs):
    vol, truth, _ = generate_phantom(PhantomSpec())
    lungs = segment_lungs(vol)
    t = truth["right_lung"] | truth["left_lung"]
    dice = 2.0 * (lungs.bits & t).sum() / (lungs.bits.sum() + t.sum())
    right, left = split_left_right(lungs)
    partition = bool(np.array_equal(right.bits | left.bits, lungs.bits) and not (right.bits & left.bits).any())
    summary, _, cfg = seed_runs[0]
    rate = summary["qc_fail_rate"]
    ok = dice >= 0.99 and partition and rate == cfg.corpus.missing_lung_rate
    record_criterion(7, "segmentation fidelity", ok, f"Dice {dice:.4f}, exact partition {partition}, QC fail rate {rate} (injected {cfg.corpus.missing_lung_rate})")
    assert ok


def test_criterion_08_downsampling_variants():
    vol, _, _ = generate_phantom(PhantomSpec())
    left = split_left_right(segment_lungs(vol))[1]
    assert not np.array_equal(left.bits, left.bits[:, :, ::-1])
    grids = {cfg.name: downsample_mask(left, (8, 12, 12), cfg) for cfg in DownsampleConfig.all_variants()}
    distinct = len({g.tobytes() for g in grids.values()})
    default = ex.ExperimentConfig().downsample
    ok = len(grids) == 6 and distinct == 6 and default == DownsampleConfig("nearest", False)
    record_criterion(8, "downsampling ablation", ok, f"{len(grids)} variants ran, {distinct} distinct, default {default.name}")
    assert ok


# ---------------------------------------------------------------------------
# 9-10: metrics
# ---------------------------------------------------------------------------


def test_criterion_09_organ_iou_boundary_cases():
    pos = [np.array([True])]
    got = {}
    for kind in ("all_allowed", "all_forbidden", "three_in_one_out"):
        a, G = iou_boundary_case(kind)
        got[kind] = organ_iou([a], [G], pos, [a], [G], pos).iou[0]
    ok = got == {"all_allowed": 1.0, "all_forbidden": 0.0, "three_in_one_out": 0.75}
    record_criterion(9, "OrganIoU boundary cases", ok, str(got))
    assert ok


def test_criterion_10_auroc_sanity():
    rng = np.random.default_rng(110)
    sep = auroc_binary(np.r_[rng.random(50), 2 + rng.random(50)], np.r_[np.zeros(50), np.ones(50)])
    indep = auroc_binary(rng.normal(size=1000), rng.integers(0, 2, size=1000))
    tied = auroc_binary(np.zeros(20), [0, 1] * 10)
    ok = sep == 1.0 and abs(indep - 0.5) <= 0.05 and tied == 0.5
    record_criterion(10, "AUROC sanity", ok, f"separable {sep}, independent {indep:.4f}, tied {tied}")
    assert ok


# ---------------------------------------------------------------------------
# 11: determinism
# ---------------------------------------------------------------------------


def _tree(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "config.json":  # config.json records its own out_dir
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


@pytest.mark.slow
def test_criterion_11_determinism(seed_runs, tmp_path):
    _, _, cfg = seed_runs[0]  # produced with --threads 4 equivalent
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(cfg.dumps())
    assert main(["run-experiment", "--config", str(cfg_path), "--out", str(tmp_path / "t1"), "--threads", "1"]) == 0
    assert main(["run-experiment", "--config", str(cfg_path), "--out", str(tmp_path / "t4"), "--threads", "4"]) == 0
    ref, t1, t4 = _tree(ex.Layout(cfg.out_dir).root), _tree(tmp_path / "t1"), _tree(tmp_path / "t4")
    ok = bool(ref) and ref == t1 == t4
    record_criterion(11, "determinism", ok, f"{len(ref)} output files identical across 3 runs (threads 4, 1, 4)")
    assert ok
