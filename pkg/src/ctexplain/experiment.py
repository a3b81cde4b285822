"""End-to-end phantom experiment: corpus synthesis through the four-cell OrganIoU table.

Stages (each reads and writes under one output directory):

    synth      -> corpus/     volumes, truth masks, truth labels, reports, manifest
    parse      -> labels/     report labels per scan
    segment    -> seg/        organ masks per scan + qc.jsonl
    build-gt   -> gt/cache/   packed attention ground truth, keyed by scan and config hash
    train      -> models/     one checkpoint per mask-loss weight
    evaluate   -> eval/       OrganIoU, AUROC, slice-score summaries, the four-cell table
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from . import evalx, explain
from .errors import UnknownAbnormality, UnknownScan
from .gt_builder import DownsampleConfig, GtCache
from .mil_head import HeadParams, TrainConfig, TrainItem, load_checkpoint, per_slice_scores, save_checkpoint, train
from .organ_seg import OrganMasks, QcReport, SegParams, segment_organs
from .report_labeler import label_report, read_labels_json, read_reports_csv, write_labels_json, write_reports_csv
from .volgrid import (
    BinaryMask3D,
    Blob,
    PhantomSpec,
    generate_phantom,
    load_mask,
    load_volume,
    organ_supports,
    save_mask,
    save_volume,
    toy_featurize,
)

log = logging.getLogger(__name__)

# planted abnormality kinds: allowed locations, blob radius, intensity delta
ABNORMALITY_KINDS = {
    "nodule": (("right_lung", "left_lung"), 2.0, 0.15),
    "mass": (("right_lung", "left_lung"), 3.0, 0.15),
    "cardiomegaly": (("heart",), 3.0, 0.25),
}

LOCATION_PHRASES = {
    "right_lung": ("right lung", "right upper lobe", "right lower lobe"),
    "left_lung": ("left lung", "left upper lobe", "left lower lobe"),
}
NORMAL_SENTENCES = (
    "no pleural effusion",
    "there is no pericardial effusion",
    "no evidence of pneumothorax",
)


@dataclass(frozen=True)
class CorpusSpec:
    n: int = 200
    abnormalities: tuple = ("nodule", "mass", "cardiomegaly")
    prevalence: float = 0.4
    # the confounder sits in the body wall and co-occurs with one abnormality
    confounder_abnormality: str = "nodule"
    confounder_rate_present: float = 0.9
    confounder_rate_absent: float = 0.1
    confounder_radius: float = 2.5
    confounder_delta: float = 0.3
    missing_lung_rate: float = 0.04
    noise: float = 0.02
    # a habitus that fills most of the field of view; air cells carry ~zero features
    # and therefore pin both heads' attention at the sigmoid midpoint
    body_radii: tuple = (30.0, 30.0)
    fractions: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if self.n < 10:
            raise ValueError("corpus needs n >= 10 scans")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) <= 0:
            raise ValueError(f"train/val/test fractions must be positive and sum to 1, got {self.fractions}")
        for a in self.abnormalities:
            if a not in ABNORMALITY_KINDS:
                raise ValueError(f"no phantom recipe for abnormality {a!r}")
        if self.confounder_abnormality and self.confounder_abnormality not in self.abnormalities:
            raise ValueError("confounder must track one of the planted abnormalities")


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusSpec = CorpusSpec()
    train: TrainConfig = TrainConfig()
    seg: SegParams = SegParams()
    downsample: DownsampleConfig = DownsampleConfig()
    slices_per_group: int = 3
    pool: int = 4
    lambdas: tuple = (0.0, 1.0 / 3.0)
    top_k: int = 3
    out_dir: str = "runs/default"
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        return _from_dict(cls, d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


def _tuplify(x):
    return tuple(_tuplify(v) for v in x) if isinstance(x, list) else x


def _from_dict(cls, d: dict):
    kwargs = {}
    unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        v = d[f.name]
        if dataclasses.is_dataclass(default) and isinstance(v, dict):
            v = _from_dict(type(default), v)
        else:
            v = _tuplify(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def _pmap(fn, items, threads: int):
    """Ordered map; results never depend on ``threads``."""
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    corpus = property(lambda self: self.root / "corpus")
    manifest = property(lambda self: self.root / "corpus" / "manifest.json")
    reports = property(lambda self: self.root / "corpus" / "reports.csv")
    labels = property(lambda self: self.root / "labels")
    seg = property(lambda self: self.root / "seg")
    gt_cache = property(lambda self: self.root / "gt" / "cache")
    models = property(lambda self: self.root / "models")
    eval = property(lambda self: self.root / "eval")
    explain = property(lambda self: self.root / "explain")

    def volume(self, sid):
        return self.corpus / "volumes" / f"{sid}.vol.json"

    def truth_mask(self, sid, organ):
        return self.corpus / "truth" / sid / f"{organ}.mask.json"

    def seg_mask(self, sid, organ):
        return self.seg / sid / f"{organ}.mask.json"

    def model(self, lam):
        return self.models / f"lambda_{lam:.4f}.ckpt.json"


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


def _place(region: np.ndarray, radius: float, rng, extra=None) -> tuple:
    """Random integer center whose ball of ``radius`` stays inside ``region``."""
    depth = ndimage.distance_transform_edt(region)
    ok = depth > radius
    if extra is not None:
        ok &= extra
    idx = np.argwhere(ok)
    if idx.size == 0:
        raise ValueError("no room to place a blob")
    return tuple(float(v) for v in idx[rng.integers(len(idx))])


def _scan_plan(cs: CorpusSpec, i: int, seed: int, missing: bool):
    rng = np.random.default_rng([seed, i])
    base = PhantomSpec(noise=cs.noise, body_radii=tuple(cs.body_radii), seed=int(rng.integers(2**31)), scan_id=f"scan{i:04d}")
    missing_lung = None
    if missing:
        missing_lung = ("right_lung", "left_lung")[int(rng.integers(2))]
    sup = organ_supports(dataclasses.replace(base, missing_lung=missing_lung))
    lesions = []
    present = {}
    for a in cs.abnormalities:
        locs, radius, delta = ABNORMALITY_KINDS[a]
        present[a] = bool(rng.random() < cs.prevalence)
        if not present[a]:
            continue
        locs = [loc for loc in locs if loc != missing_lung]
        loc = locs[int(rng.integers(len(locs)))]
        region = sup["mediastinum"] if loc == "heart" else sup[loc]
        lesions.append(Blob(loc, _place(region, radius, rng), radius, delta, a))
    confounder = None
    if cs.confounder_abnormality:
        rate = cs.confounder_rate_present if present[cs.confounder_abnormality] else cs.confounder_rate_absent
        if rng.random() < rate:
            # anterior body wall
            rows = np.zeros(base.dims, dtype=bool)
            rows[:, :12, :] = True
            c = _place(sup["other"], cs.confounder_radius, rng, extra=rows)
            confounder = Blob("other", c, cs.confounder_radius, cs.confounder_delta, "confounder")
    phrase_choices = [int(rng.integers(3)) for _ in lesions]
    normal_choice = int(rng.integers(len(NORMAL_SENTENCES)))
    spec = dataclasses.replace(base, lesions=tuple(lesions), confounder=confounder, missing_lung=missing_lung)
    return spec, phrase_choices, normal_choice


def render_report(lesions, phrase_choices, normal_choice) -> list:
    """Template sentences for planted lesions plus one normal-finding sentence."""
    out = []
    for blob, k in zip(lesions, phrase_choices):
        if blob.abnormality == "cardiomegaly":
            out.append(("the heart is enlarged", "cardiomegaly is present", "there is cardiomegaly")[k])
        else:
            where = LOCATION_PHRASES[blob.location][k]
            out.append(f"there is a {blob.abnormality} in the {where}")
    out.append(NORMAL_SENTENCES[normal_choice])
    if not any(b.location in LOCATION_PHRASES for b in lesions):
        out.append("the lungs are clear")
    return out


def synth(cfg: ExperimentConfig, threads: int = 1) -> dict:
    cs = cfg.corpus
    lay = Layout(cfg.out_dir)
    rng = np.random.default_rng([cfg.seed, 10**6])
    n_missing = int(round(cs.missing_lung_rate * cs.n))
    missing = set(int(i) for i in rng.permutation(cs.n)[:n_missing])
    order = rng.permutation(cs.n)
    n_train = int(round(cs.fractions[0] * cs.n))
    n_val = int(round(cs.fractions[1] * cs.n))
    split = {}
    for rank, i in enumerate(order):
        split[int(i)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    def one(i):
        spec, phrases, normal = _scan_plan(cs, i, cfg.seed, i in missing)
        vol, masks, pairs = generate_phantom(spec)
        save_volume(vol, lay.volume(spec.scan_id))
        for organ in ("right_lung", "left_lung", "mediastinum"):
            save_mask(BinaryMask3D(masks[organ], organ), lay.truth_mask(spec.scan_id, organ))
        return spec.scan_id, sorted(pairs), render_report(spec.lesions, phrases, normal), spec

    results = _pmap(one, range(cs.n), threads)
    reports = {sid: rep for sid, _, rep, _ in results}
    write_reports_csv(lay.reports, reports)
    manifest = {
        "seed": cfg.seed,
        "abnormalities": list(cs.abnormalities),
        "dims": list(results[0][3].dims),
        "scans": [
            {
                "scan_id": sid,
                "split": split[i],
                "truth_pairs": [list(p) for p in pairs],
                "missing_lung": spec.missing_lung,
                "confounder": spec.confounder is not None,
            }
            for i, (sid, pairs, _, spec) in enumerate(results)
        ],
        "splits": {s: [sid for i, (sid, *_rest) in enumerate(results) if split[i] == s] for s in ("train", "val", "test")},
    }
    lay.manifest.write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def load_manifest(out_dir) -> dict:
    return json.loads(Layout(out_dir).manifest.read_text())


# ---------------------------------------------------------------------------
# Parse, segment, featurize, ground truth
# ---------------------------------------------------------------------------


def parse_reports(out_dir, reports_csv=None) -> dict:
    lay = Layout(out_dir)
    reports = read_reports_csv(reports_csv or lay.reports)
    out = {}
    for sid, sentences in reports.items():
        labels = label_report(sentences, sid)
        write_labels_json(lay.labels / f"{sid}.labels.json", labels)
        out[sid] = labels
    return out


def segment_scan(out_dir, sid: str, params: SegParams):
    lay = Layout(out_dir)
    vol = load_volume(lay.volume(sid))
    organs, qc = segment_organs(vol, params)
    for organ, m in organs.as_dict().items():
        save_mask(m, lay.seg_mask(sid, organ), {"params_hash": params.digest(), "heuristic": organs.heuristic})
    return organs, qc


def segment_all(out_dir, scan_ids, params: SegParams, threads: int = 1):
    lay = Layout(out_dir)
    res = _pmap(lambda sid: segment_scan(out_dir, sid, params), scan_ids, threads)
    lay.seg.mkdir(parents=True, exist_ok=True)
    with open(lay.seg / "qc.jsonl", "w") as f:
        for sid, (_, qc) in zip(scan_ids, res):
            f.write(json.dumps({"scan_id": sid, **qc.to_json()}) + "\n")
    return {sid: r for sid, r in zip(scan_ids, res)}


def load_organs(out_dir, sid: str) -> OrganMasks:
    lay = Layout(out_dir)
    header = json.loads(lay.seg_mask(sid, "right_lung").read_text())
    ms = {o: load_mask(lay.seg_mask(sid, o)) for o in ("right_lung", "left_lung", "mediastinum")}
    return OrganMasks(ms["right_lung"], ms["left_lung"], ms["mediastinum"], heuristic=bool(header.get("heuristic")))


def featurize_scan(out_dir, sid, g, pool) -> np.ndarray:
    return toy_featurize(load_volume(Layout(out_dir).volume(sid)), g, pool).values


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------


@dataclass
class ScanData:
    scan_id: str
    split: str
    Z: np.ndarray
    y: np.ndarray
    gt: object
    qc: QcReport
    truth_pairs: list
    parsed_pairs: list


def read_qc(out_dir) -> dict:
    out = {}
    with open(Layout(out_dir).seg / "qc.jsonl") as f:
        for line in f:
            d = json.loads(line)
            out[d["scan_id"]] = QcReport(tuple(d["right_dims"]), tuple(d["left_dims"]), d["passed"], d["reason"])
    return out


def load_data(cfg: ExperimentConfig, threads: int = 1, manifest: Optional[dict] = None,
              downsample: Optional[DownsampleConfig] = None) -> list:
    """Featurize every scan and attach labels, QC and (cached) ground truth from earlier stages."""
    out = cfg.out_dir
    lay = Layout(out)
    manifest = manifest or load_manifest(out)
    abn = tuple(manifest["abnormalities"])
    qc = read_qc(out)
    cache = GtCache(lay.gt_cache)
    ds = downsample or cfg.downsample
    g, pool = cfg.slices_per_group, cfg.pool

    def one(entry):
        sid = entry["scan_id"]
        Z = featurize_scan(out, sid, g, pool)
        lab = read_labels_json(lay.labels / f"{sid}.labels.json")
        y = np.array([float(lab.has(a)) for a in abn])
        gt, _ = cache.get_or_build(sid, lab.pairs(), load_organs(out, sid), (Z.shape[0], Z.shape[2], Z.shape[3]),
                                   abn, ds, cfg.train.absent_mode)
        return ScanData(sid, entry["split"], Z, y, gt, qc[sid], entry["truth_pairs"], lab.pairs())

    return _pmap(one, manifest["scans"], threads)


def prepare(cfg: ExperimentConfig, threads: int = 1, manifest: Optional[dict] = None) -> list:
    """Parse, segment, then :func:`load_data`."""
    manifest = manifest or load_manifest(cfg.out_dir)
    parse_reports(cfg.out_dir)
    segment_all(cfg.out_dir, [s["scan_id"] for s in manifest["scans"]], cfg.seg, threads)
    return load_data(cfg, threads, manifest)


def load_models(cfg: ExperimentConfig) -> dict:
    out = {}
    for lam in cfg.lambdas:
        p, _, header = load_checkpoint(Layout(cfg.out_dir).model(lam))
        out[float(lam)] = (p, header.get("history"))
    return out


def train_models(cfg: ExperimentConfig, data: list, threads: int = 1) -> dict:
    lay = Layout(cfg.out_dir)
    items = [TrainItem(d.scan_id, d.Z, d.y, d.gt.G, d.gt.rows_included) for d in data if d.split == "train"]
    H, F, D1, D2 = items[0].Z.shape
    init = HeadParams.init(len(items[0].y), F, D1, D2, H, seed=cfg.seed)
    out = {}
    for lam in cfg.lambdas:
        tcfg = dataclasses.replace(cfg.train, lam=float(lam), seed=cfg.seed)
        p, vel, hist = train(items, tcfg, init=init, threads=threads)
        steps = tcfg.epochs * int(np.ceil(len(items) / tcfg.batch_size))
        save_checkpoint(lay.model(lam), p, vel, cfg.seed, steps,
                        {"lambda": float(lam), "history": asdict(hist), "aggregation": tcfg.aggregation})
        # evaluate the stored float32 weights so every subcommand sees the same model
        p, _, _ = load_checkpoint(lay.model(lam))
        out[float(lam)] = (p, hist)
    return out


def _maps(method: str, d: ScanData, p: HeadParams, mode: str) -> np.ndarray:
    return explain.attention_map(d.Z, p, method, mode).raw


def evaluate(cfg: ExperimentConfig, data: list, models: dict, abn) -> dict:
    """OrganIoU for every (lambda, method), AUROC per lambda, slice summaries; writes eval/."""
    lay = Layout(cfg.out_dir)
    mode = cfg.train.aggregation
    val = [d for d in data if d.split == "val"]
    test = [d for d in data if d.split == "test"]
    iou, au, cells = {}, {}, {}
    for lam, (p, _) in models.items():
        for method in explain.METHODS:
            maps = {id(d): evalx.squash(_maps(method, d, p, mode)) for d in val + test}
            r = evalx.organ_iou(
                [maps[id(d)] for d in val], [d.gt.G for d in val], [d.y > 0 for d in val],
                [maps[id(d)] for d in test], [d.gt.G for d in test], [d.y > 0 for d in test],
                names=abn,
            )
            iou[f"lambda={lam:.4f}/{method}"] = r
            cells[(lam, method)] = r.mean
        S = np.array([per_slice_scores(d.Z, p).mean(axis=1) if mode == "mean" else per_slice_scores(d.Z, p).max(axis=1)
                      for d in test])
        au[f"lambda={lam:.4f}"] = evalx.auroc(S, np.array([d.y for d in test]), names=abn)
        summary = evalx.summarize_slice_scores(np.array([per_slice_scores(d.Z, p) for d in test]),
                                               np.array([d.y for d in test]), abn)
        evalx.write_slice_summary_csv(lay.eval / f"slice_scores_lambda_{lam:.4f}.csv", summary)
    evalx.write_iou_csv(lay.eval / "organ_iou.csv", iou)
    evalx.write_auroc_csv(lay.eval / "auroc.csv", au)
    table = {
        "rows": [
            {"model": f"lambda={lam:.4f}",
             "gradcam_organ_iou": cells[(lam, "gradcam")],
             "hirescam_organ_iou": cells[(lam, "hirescam")],
             "median_auroc": au[f"lambda={lam:.4f}"].median}
            for lam in models
        ]
    }
    with open(lay.eval / "table.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "gradcam_organ_iou", "hirescam_organ_iou", "median_auroc"])
        for row in table["rows"]:
            w.writerow([row["model"], repr(row["gradcam_organ_iou"]), repr(row["hirescam_organ_iou"]),
                        repr(row["median_auroc"])])
    return {"table": table, "organ_iou": iou, "auroc": au}


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> dict:
    t0 = time.perf_counter()
    lay = Layout(cfg.out_dir)
    lay.root.mkdir(parents=True, exist_ok=True)
    (lay.root / "config.json").write_text(cfg.dumps())
    manifest = synth(cfg, threads)
    data = prepare(cfg, threads, manifest)
    models = train_models(cfg, data, threads)
    abn = tuple(manifest["abnormalities"])
    res = evaluate(cfg, data, models, abn)
    qc_fail = sum(not d.qc.passed for d in data)
    parsed_ok = sum(sorted(map(tuple, d.truth_pairs)) == sorted(d.parsed_pairs) for d in data)
    summary = {
        "seed": cfg.seed,
        "n_scans": len(data),
        "qc_fail_rate": qc_fail / len(data),
        "report_label_agreement": parsed_ok / len(data),
        "epoch0_loss": {f"{lam:.4f}": h.total[0] for lam, (_, h) in models.items()},
        "final_loss": {f"{lam:.4f}": h.total[-1] for lam, (_, h) in models.items()},
        "table": res["table"]["rows"],
    }
    (lay.eval / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("run-experiment finished in %.1fs", time.perf_counter() - t0)
    return summary



# ---------------------------------------------------------------------------
# Single-scan explanation export
# ---------------------------------------------------------------------------


def explain_scan(cfg: ExperimentConfig, scan_id: str, abnormality: str, checkpoint=None,
                 method: str = "hirescam", k: Optional[int] = None) -> dict:
    """Export heat maps, raw values and the top-``k`` slice groups for one (scan, abnormality)."""
    lay = Layout(cfg.out_dir)
    manifest = load_manifest(cfg.out_dir)
    abn = list(manifest["abnormalities"])
    if abnormality not in abn:
        raise UnknownAbnormality(f"unknown abnormality {abnormality!r}; expected one of {abn}")
    if scan_id not in {s["scan_id"] for s in manifest["scans"]}:
        raise UnknownScan(f"unknown scan {scan_id!r}")
    ckpt = Path(checkpoint) if checkpoint else lay.model(cfg.lambdas[-1])
    p, _, header = load_checkpoint(ckpt)
    mode = header.get("aggregation", cfg.train.aggregation)
    vol = load_volume(lay.volume(scan_id))
    Z = toy_featurize(vol, cfg.slices_per_group, cfg.pool).values
    m = abn.index(abnormality)
    raw = explain.attention_map(Z, p, method, mode).raw[m]
    out_dir = lay.explain / scan_id / abnormality / method
    explain.export_heatmaps(out_dir, scan_id, m, raw, vol.voxels)
    k = cfg.top_k if k is None else k
    top = explain.top_slices(per_slice_scores(Z, p), m, k)
    result = {"scan_id": scan_id, "abnormality": abnormality, "method": method,
              "checkpoint": str(ckpt), "top_slices": top, "out_dir": str(out_dir)}
    (out_dir / "top_slices.json").write_text(json.dumps(result, indent=2) + "\n")
    return result
