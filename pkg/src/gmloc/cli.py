"""Command-line entry point: ``gmloc <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .scenario import export_jsonl

log = logging.getLogger("gmloc")


def _config(args) -> pl.PipelineConfig:
    overrides = {
        "seed": args.seed,
        "profile": args.profile,
        "K": args.k,
        "alpha": args.alpha,
        "filter": args.filter,
        "model": getattr(args, "model", None),
        "model_path": getattr(args, "model_path", None),
        "dataset": getattr(args, "dataset", None),
        "train_dataset": getattr(args, "train_dataset", None),
        "out_dir": args.out_dir,
    }
    if args.config is not None:
        return pl.PipelineConfig.from_json(args.config, **overrides)
    return pl.PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})


def _out_dir(cfg, default="."):
    out = Path(cfg.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    recs = pl.evaluation_records(cfg)
    export_jsonl(recs, out / "records.jsonl")
    log.info("wrote %d %s records to %s", len(recs), cfg.profile, out / "records.jsonl")
    if args.train:
        tr = pl.training_records(cfg)
        export_jsonl(tr, out / "train.jsonl")
        log.info("wrote %d training records to %s", len(tr), out / "train.jsonl")


def cmd_train(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    model, curve = pl.train_model(cfg)
    path = out / ("model.npz" if cfg.model == "kse" else "model.json")
    pl.save_model(model, path)
    if curve:
        with open(out / "training_curve.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_nll"])
            for c in curve:
                w.writerow([c["epoch"], repr(float(c["train_loss"])), repr(float(c["val_nll"]))])
    log.info("saved %s model to %s", cfg.model, path)


def cmd_eval_uq(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    series = pl.eval_uq(cfg)
    pl.write_uq_outputs(series, out, bins=args.bins, svg=not args.no_svg)
    for m, d in pl.uq_summary(series).items():
        cov = ", ".join(f"{k}%: {v:.1f}" for k, v in d["coverage"].items())
        print(f"{m:16s} p99={d['percentiles']['p99']:.2f}  coverage [{cov}]")


def cmd_filter(args):
    cfg = _config(args)
    _out_dir(cfg)
    res = pl.run_pipeline(cfg)
    print(json.dumps(res.run.report.to_dict(), sort_keys=True))


def cmd_report(args):
    root = Path(args.out_dir or ".")
    rows = pl.collect_reports(root)
    if not rows:
        raise FileNotFoundError(f"no report.json found under {root}")
    pl.write_report_table(rows, root / "table.csv")
    head = f"{'run':24s} {'filter':14s} {'model':9s} {'alpha':>6s} {'d_err':>8s} {'cred68':>7s} {'cred95':>7s} {'cred997':>7s} {'n_r':>6s}"
    print(head)
    for r in rows:
        print(
            f"{r['run']:24s} {r['filter']:14s} {r['model']:9s} {r['alpha']:6g} {r['d_err']:8.3f} "
            f"{r['cred68']:7.1f} {r['cred95']:7.1f} {r['cred997']:7.1f} {r['n_r']:6.1f}"
        )


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with pipeline settings (flags override it)")
    common.add_argument("--seed", type=int)
    common.add_argument("--profile", help="condition profile for evaluation records")
    common.add_argument("--k", type=int, help="mixture components of the learned model")
    common.add_argument("--alpha", type=float, help="gate confidence; 0 disables gating")
    common.add_argument("--filter", choices=pl.FILTERS)
    common.add_argument("--out-dir")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", help="evaluation records (JSONL) instead of simulating")
    data.add_argument("--train-dataset", help="training records (JSONL) instead of simulating")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", choices=pl.MODELS)
    model.add_argument("--model-path", help="saved model (.npz for kse, .json otherwise)")

    p = argparse.ArgumentParser(prog="gmloc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write simulated records as JSONL")
    s.add_argument("--train", action="store_true", help="also write the mixed-condition training set")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common, data, model], help="fit a measurement model")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval-uq", parents=[common, data, model], help="calibration histograms for all methods")
    s.add_argument("--bins", type=int, default=50)
    s.add_argument("--no-svg", action="store_true")
    s.set_defaults(func=cmd_eval_uq)

    s = sub.add_parser("filter", parents=[common, data, model], help="run a filter and write trace.csv and report.json")
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("report", parents=[common], help="tabulate report.json files under --out-dir")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError, OSError) as e:
        print(f"gmloc {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
