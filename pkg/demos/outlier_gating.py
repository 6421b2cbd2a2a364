"""Gated vs ungated filtering on an outlier-injected night drive.

Fits the constant and match-count baseline models on a mixed-condition
training set, then runs each filter/gate combination on one night sequence.
Pass a trained network (``gmloc train`` writes ``model.npz``) to add the
learned mixture model.

    python3 demos/outlier_gating.py --seed 3 [--model-path runs/model/model.npz]
"""

import argparse

import numpy as np

from gmloc import pipeline as pl

ap = argparse.ArgumentParser()
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--model-path")
args = ap.parse_args()

cfg = pl.PipelineConfig(seed=args.seed, profile="night")
train = pl.training_records(cfg)
records = pl.evaluation_records(cfg)
models = {k: pl.train_model(cfg, train, kind=k)[0] for k in ("constant", "baseline")}
if args.model_path:
    models["kse"] = pl.load_model(args.model_path)

outliers = np.array([r.outlier for r in records])
print(f"{len(records)} frames, {outliers.sum()} injected outliers\n")
print(f"{'model':9s} {'filter':14s} {'alpha':>6s} {'d_err':>7s} {'n_r':>6s} {'outliers caught':>16s}")
for name, model in models.items():
    meas = pl.measurements_for(records, model)
    for flt, alpha in (("spf", 0.0), ("spf", 0.99), ("spf+gm-gating", 0.99), ("gsf", 0.99)):
        run = pl.run_filter(records, meas, flt, alpha)
        rejected = np.array([row["accepted"] == 0 for row in run.rows])
        caught = rejected[outliers].mean() if alpha > 0 else 0.0
        print(f"{name:9s} {flt:14s} {alpha:6g} {run.d_err:7.2f} {100 * run.report.n_r:5.1f}% {100 * caught:15.0f}%")
