"""Command-line entry point: ``ctexplain <subcommand> [--config PATH] [--seed N] [--threads N] [--out DIR]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .errors import DataError, NumericError
from .gt_builder import DownsampleConfig

log = logging.getLogger("ctexplain")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _common(suppress: bool = False) -> argparse.ArgumentParser:
    # the subcommand copy suppresses defaults so flags given before the subcommand survive
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=d(None), help="experiment config JSON (see init-config)")
    p.add_argument("--seed", type=int, default=d(None), help="global seed; overrides the config")
    p.add_argument("--threads", type=int, default=d(1), help="worker threads (results do not depend on this)")
    p.add_argument("--out", type=Path, default=d(None), help="output directory; overrides the config")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def _load_config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(args.out))
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return cfg


def _emit(obj):
    sys.stdout.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(cfg, args):
    man = ex.synth(cfg, args.threads)
    _emit({"out": cfg.out_dir, "n_scans": len(man["scans"]),
           "splits": {k: len(v) for k, v in man["splits"].items()}})


def cmd_parse_reports(cfg, args):
    labels = ex.parse_reports(cfg.out_dir, args.reports)
    _emit({"n_reports": len(labels), "n_pairs": sum(len(v.pairs()) for v in labels.values())})


def cmd_segment(cfg, args):
    sids = [s["scan_id"] for s in ex.load_manifest(cfg.out_dir)["scans"]]
    res = ex.segment_all(cfg.out_dir, sids, cfg.seg, args.threads)
    for sid in sids:
        _emit({"scan_id": sid, **res[sid][1].to_json()})


def cmd_build_gt(cfg, args):
    variants = DownsampleConfig.all_variants() if args.all_variants else [cfg.downsample]
    for ds in variants:
        data = ex.load_data(cfg, args.threads, downsample=ds)
        bits = sum(int(d.gt.G.sum()) for d in data)
        _emit({"variant": ds.name, "n_scans": len(data), "set_bits": bits,
               "heuristic_scans": sum(bool(d.gt.provenance["heuristic"]) for d in data)})


def cmd_train(cfg, args):
    data = ex.load_data(cfg, args.threads)
    models = ex.train_models(cfg, data, args.threads)
    for lam, (_, hist) in models.items():
        _emit({"lambda": lam, "checkpoint": str(ex.Layout(cfg.out_dir).model(lam)),
               "loss_epoch0": hist.total[0], "loss_final": hist.total[-1]})


def cmd_explain(cfg, args):
    res = ex.explain_scan(cfg, args.scan, args.abnormality, args.checkpoint, args.method, args.top_k)
    _emit(res)


def cmd_evaluate(cfg, args):
    data = ex.load_data(cfg, args.threads)
    models = ex.load_models(cfg)
    abn = tuple(ex.load_manifest(cfg.out_dir)["abnormalities"])
    res = ex.evaluate(cfg, data, models, abn)
    for row in res["table"]["rows"]:
        _emit(row)


def cmd_run_experiment(cfg, args):
    summary = ex.run_experiment(cfg, args.threads)
    _emit(summary)


def cmd_init_config(cfg, args):
    text = cfg.dumps()
    if args.path:
        Path(args.path).parent.mkdir(parents=True, exist_ok=True)
        Path(args.path).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctexplain", description=__doc__.splitlines()[0], parents=[_common()])
    common = _common(suppress=True)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    add("synth", cmd_synth, "generate the phantom corpus")
    sp = add("parse-reports", cmd_parse_reports, "label reports into (abnormality, location) pairs")
    sp.add_argument("--reports", type=Path, help="reports CSV (scan_id,sentence_index,text); default corpus/reports.csv")
    add("segment", cmd_segment, "segment organs; prints one QC report per scan")
    sp = add("build-gt", cmd_build_gt, "build and cache attention ground truth")
    sp.add_argument("--all-variants", action="store_true", help="all six downsampling/dilation variants")
    add("train", cmd_train, "train one head per configured mask-loss weight")
    sp = add("explain", cmd_explain, "export heat maps and top slices for one scan")
    sp.add_argument("--scan", required=True)
    sp.add_argument("--abnormality", required=True)
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--method", choices=("hirescam", "gradcam"), default="hirescam")
    sp.add_argument("--top-k", type=int)
    add("evaluate", cmd_evaluate, "OrganIoU / AUROC tables for trained heads")
    add("run-experiment", cmd_run_experiment, "synth -> evaluate end to end")
    sp = add("init-config", cmd_init_config, "write the default config")
    sp.add_argument("path", nargs="?", help="destination file (default: stdout)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        args.fn(cfg, args)
    except UsageError as e:
        sys.stderr.write(f"ctexplain: usage error: {e}\n")
        return EXIT_USAGE
    except NumericError as e:
        sys.stderr.write(f"ctexplain: numeric error: {e}\n")
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, KeyError, json.JSONDecodeError) as e:
        sys.stderr.write(f"ctexplain: data error: {e}\n")
        return EXIT_DATA
    except ValueError as e:
        # config validation failures
        sys.stderr.write(f"ctexplain: data error: {e}\n")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
