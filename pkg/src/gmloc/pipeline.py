"""End-to-end experiment harness: measurement models, filter runs, reports."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import evaluation as ev
from .filters import (
    GsfBelief,
    MotionParams,
    UkfParams,
    gsf_condense,
    gsf_predict,
    gsf_update,
    initial_belief,
    predicted_measurement,
    spf_update_gm,
    ukf_predict,
)
from .gating import gate_gaussian, gate_gm
from .kse import (
    BaselineModel,
    KseParams,
    TrainConfig,
    baseline_fit,
    baseline_predict,
    load_params,
    predict_batch,
    save_params,
    train,
)
from .mixture import GaussMix2, condense, rotate_to_inertial
from .scenario import default_profiles, import_jsonl, matched_process_noise, profiles_from_json, simulate

__all__ = [
    "FILTERS",
    "MODELS",
    "TRACE_COLUMNS",
    "PipelineConfig",
    "FilterRun",
    "ConstantModel",
    "measurements_for",
    "run_filter",
    "fit_constant",
    "uq_series",
    "write_trace_csv",
    "run_pipeline",
    "training_records",
    "evaluation_records",
    "train_model",
    "save_model",
    "load_model",
    "eval_uq",
    "uq_summary",
    "write_uq_outputs",
    "collect_reports",
    "write_report_table",
]

log = logging.getLogger(__name__)

FILTERS = ("spf", "gsf", "spf+gm-gating")
MODELS = ("kse", "baseline", "constant")
TRACE_COLUMNS = (
    "t", "x_est", "y_est", "theta_est", "v_est", "thetadot_est", "x_gt", "y_gt",
    "d_err", "accepted", "cred68", "cred95", "cred997", "n_hypotheses",
)


@dataclass
class ConstantModel:
    sigma: float

    def predict(self, fc):
        return ev.constant_measurement(fc.r_hat, self.sigma)


def fit_constant(train_records, val_fraction=0.1, seed=0, grid=None) -> ConstantModel:
    """Isotropic sigma tuned for NLL on a seeded validation split."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(train_records))
    n_val = max(1, int(round(val_fraction * len(train_records))))
    errs = np.array([train_records[i].frame.error_car() for i in perm[:n_val]])
    return ConstantModel(ev.fit_constant_sigma(errs, grid))


def measurements_for(records, model):
    """Car-frame measurement mixtures (centred on each ``r_hat``) for every record."""
    frames = [r.frame for r in records]
    if isinstance(model, KseParams):
        return predict_batch(model, frames)
    if isinstance(model, BaselineModel):
        return [baseline_predict(model, fc) for fc in frames]
    if isinstance(model, ConstantModel):
        return [model.predict(fc) for fc in frames]
    raise TypeError(f"unsupported measurement model {type(model).__name__}")


@dataclass
class FilterRun:
    rows: list
    report: ev.CredibilityReport

    @property
    def d_err(self):
        return self.report.d_err


def _position_mixture(gb: GsfBelief):
    return GaussMix2(
        gb.weights,
        [h.mean[:2] for h in gb.hypotheses],
        [h.cov[:2, :2] for h in gb.hypotheses],
    )


def run_filter(
    records,
    measurements,
    filter="spf",
    alpha=0.0,
    M_max=6,
    w_floor=1e-4,
    up: UkfParams = UkfParams(),
    process_noise=None,
    bounds="sigma",
) -> FilterRun:
    """Run one filter over a record sequence.

    The first two measurements initialize the state. ``alpha=0`` disables
    gating. ``process_noise`` is a per-second 5x5 matrix (scaled by each
    step's dt); None uses the noise matched to the simulator.
    """
    if filter not in FILTERS:
        raise ValueError(f"unknown filter {filter!r}")
    if len(records) < 2:
        raise ValueError("need at least two records")
    gsf = filter == "gsf"
    t = np.array([r.t for r in records])
    b = initial_belief(measurements[0].mean(), measurements[1].mean(), t[1] - t[0])
    gb = GsfBelief.from_belief(b)

    q_rate = matched_process_noise() if process_noise is None else np.asarray(process_noise, dtype=float)
    rows, errors, inside, accepted = [], [], [], []

    def emit(i, est, pos_post, acc):
        gt = records[i].state_gt
        err = est.mean[:2] - gt[:2]
        mode = "gsf" if gsf else "spf"
        flags = ev.step_credibility(-err, pos_post, mode=mode, bounds=bounds)
        rows.append({
            "t": float(t[i]),
            "x_est": float(est.mean[0]), "y_est": float(est.mean[1]), "theta_est": float(est.mean[2]),
            "v_est": float(est.mean[3]), "thetadot_est": float(est.mean[4]),
            "x_gt": float(gt[0]), "y_gt": float(gt[1]),
            "d_err": float(np.linalg.norm(err)),
            "accepted": int(acc),
            "cred68": int(flags[0]), "cred95": int(flags[1]), "cred997": int(flags[2]),
            "n_hypotheses": len(gb) if gsf else 1,
        })
        errors.append(err)
        inside.append(flags)

    emit(0, b, _position_mixture(gb) if gsf else b.cov[:2, :2], True)
    for i in range(1, len(records)):
        dt = t[i] - t[i - 1]
        mp = MotionParams(dt, q_rate * dt)
        meas = measurements[i]
        if gsf:
            gb = gsf_predict(gb, mp, up)
            est = gsf_condense(gb)
            acc = True
            if alpha > 0:
                pred = [predicted_measurement(h, up) for h in gb.hypotheses]
                pred_gm = GaussMix2(gb.weights, [p[0] for p in pred], [p[1] for p in pred])
                inertial = rotate_to_inertial(meas, est.mean[2])
                acc = gate_gm(inertial.mean(), pred_gm, inertial, alpha).accepted
            if acc:
                gb, _ = gsf_update(gb, meas, None, M_max, w_floor, up)
            est = gsf_condense(gb)
            emit(i, est, _position_mixture(gb), acc)
        else:
            b = ukf_predict(b, mp, up)
            acc = True
            if alpha > 0:
                inertial = rotate_to_inertial(meas, b.mean[2])
                zhat, Pzz = predicted_measurement(b, up)
                if filter == "spf":
                    g = condense(inertial)
                    acc = gate_gaussian(g.mean - zhat, Pzz + g.cov, alpha).accepted
                else:
                    acc = gate_gm(inertial.mean(), GaussMix2.single(zhat, Pzz), inertial, alpha).accepted
            if acc:
                b, _ = spf_update_gm(b, meas, b.mean[2], up)
            emit(i, b, b.cov[:2, :2], acc)
        accepted.append(acc)

    report = ev.credibility(np.array(errors), np.array(inside), accepted)
    return FilterRun(rows, report)


def write_trace_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in TRACE_COLUMNS])


def uq_series(records, measurements, method, condition=""):
    """Calibration statistic series for car-frame measurement mixtures.

    Each mixture is rotated into the inertial frame with the record's true
    heading before comparing against ``r_gt``.
    """
    inertial = [rotate_to_inertial(m, r.frame.heading) for m, r in zip(measurements, records)]
    truths = [r.frame.r_gt for r in records]
    return ev.calibration_series(method, inertial, truths, condition)


# ------------------------------------------------------------------ config


@dataclass
class PipelineConfig:
    """Settings for one experiment run, loadable from a single JSON file."""

    seed: int = 0
    profile: str = "night"
    profiles_file: Optional[str] = None
    dataset: Optional[str] = None
    train_dataset: Optional[str] = None
    duration: float = 300.0
    dt: float = 0.5
    train_frames: int = 5000
    model: str = "kse"
    model_path: Optional[str] = None
    K: int = 3
    Len: int = 256
    hidden: tuple = (64, 128, 64)
    max_epochs: int = 80
    patience: Optional[int] = 10
    filter: str = "spf"
    alpha: float = 0.0
    M_max: int = 6
    w_floor: float = 1e-4
    ukf: dict = field(default_factory=lambda: {"alpha": 0.1, "beta": 2.0, "kappa": 0.0})
    # per-second diagonal; None selects the noise matched to the simulator
    process_noise: Optional[list] = None
    bounds: str = "sigma"
    baseline_bins: int = 5
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.filter not in FILTERS:
            raise ValueError(f"filter must be one of {FILTERS}")
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if not (self.alpha == 0 or 0 < self.alpha < 1):
            raise ValueError("alpha must be 0 (no gating) or in (0, 1)")
        self.hidden = tuple(self.hidden)

    @classmethod
    def from_json(cls, path, **overrides):
        with open(path) as f:
            d = json.load(f)
        if not isinstance(d, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValueError(f"{path}: unknown config keys {unknown}")
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def profiles(self):
        if self.profiles_file is None:
            return default_profiles()
        return profiles_from_json(Path(self.profiles_file).read_text())


def training_records(cfg: PipelineConfig):
    if cfg.train_dataset is not None:
        return import_jsonl(cfg.train_dataset)
    profiles = cfg.profiles()
    names = sorted(profiles)
    per = int(np.ceil(cfg.train_frames / len(names)))
    dur = (per - 1) * cfg.dt
    recs = []
    for j, name in enumerate(names):
        recs.extend(simulate([cfg.seed, 1, j], profiles[name], dur, cfg.dt))
    return recs


def evaluation_records(cfg: PipelineConfig):
    if cfg.dataset is not None:
        return import_jsonl(cfg.dataset)
    profiles = cfg.profiles()
    if cfg.profile not in profiles:
        raise ValueError(f"unknown profile {cfg.profile!r}; available: {sorted(profiles)}")
    return simulate([cfg.seed, 2], profiles[cfg.profile], cfg.duration, cfg.dt)


def train_model(cfg: PipelineConfig, train_records=None, kind=None):
    """Fit the configured measurement model; returns ``(model, curve)``.

    ``curve`` is the per-epoch training log for the learned model and empty
    for the others.
    """
    kind = kind or cfg.model
    recs = train_records if train_records is not None else training_records(cfg)
    if kind == "kse":
        tc = TrainConfig(
            seed=cfg.seed, K=cfg.K, Len=cfg.Len, hidden=cfg.hidden, max_epochs=cfg.max_epochs, patience=cfg.patience
        )
        res = train([r.frame for r in recs], tc)
        return res.params, res.curve
    if kind == "baseline":
        return baseline_fit([r.frame for r in recs], cfg.baseline_bins), []
    if kind == "constant":
        return fit_constant(recs, seed=cfg.seed), []
    raise ValueError(f"model must be one of {MODELS}")


def save_model(model, path):
    """KSE parameters go to ``.npz``; baseline and constant models to JSON."""
    path = Path(path)
    if isinstance(model, KseParams):
        save_params(model, path)
        return
    if isinstance(model, BaselineModel):
        d = {"kind": "baseline", **model.to_dict()}
    elif isinstance(model, ConstantModel):
        d = {"kind": "constant", "sigma": model.sigma}
    else:
        raise TypeError(f"unsupported measurement model {type(model).__name__}")
    path.write_text(json.dumps(d, sort_keys=True) + "\n")


def load_model(path, K=None, Len=None):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file {path} not found")
    if path.suffix == ".npz":
        return load_params(path, K=K, Len=Len)
    d = json.loads(path.read_text())
    kind = d.pop("kind", None)
    if kind == "baseline":
        return BaselineModel.from_dict(d)
    if kind == "constant":
        return ConstantModel(float(d["sigma"]))
    raise ValueError(f"{path}: unknown model kind {kind!r}")


def _load_model(cfg: PipelineConfig, train_records=None):
    if cfg.model_path is not None:
        model = load_model(cfg.model_path, K=cfg.K, Len=cfg.Len)
        expected = {"kse": KseParams, "baseline": BaselineModel, "constant": ConstantModel}[cfg.model]
        if not isinstance(model, expected):
            raise ValueError(f"{cfg.model_path} does not hold a {cfg.model} model")
        return model
    return train_model(cfg, train_records)[0]


def _series_methods(model):
    if isinstance(model, KseParams):
        return ("gm-condensed", "gm-marginalized")
    return ("baseline",) if isinstance(model, BaselineModel) else ("constant",)


@dataclass
class PipelineResult:
    run: FilterRun
    series: dict
    config: PipelineConfig


def run_pipeline(cfg: PipelineConfig, records=None, model=None) -> PipelineResult:
    """Records -> measurement model -> gated filter -> metrics (and files in ``out_dir``)."""
    records = records if records is not None else evaluation_records(cfg)
    model = model if model is not None else _load_model(cfg)
    meas = measurements_for(records, model)
    run = run_filter(
        records,
        meas,
        cfg.filter,
        cfg.alpha,
        cfg.M_max,
        cfg.w_floor,
        UkfParams(**cfg.ukf),
        None if cfg.process_noise is None else np.diag(cfg.process_noise),
        cfg.bounds,
    )
    cond = records[0].frame.condition
    series = {m: uq_series(records, meas, m, cond) for m in _series_methods(model)}
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_trace_csv(run.rows, out / "trace.csv")
        # out_dir is left out so identical runs written to different places compare equal
        settings = {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}
        report = {"config": settings, "condition": cond, **run.report.to_dict()}
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return PipelineResult(run, series, cfg)


def eval_uq(cfg: PipelineConfig, records=None, models=None, train_records=None):
    """Calibration series for every uncertainty method on one record set.

    ``models`` maps a model kind to a fitted model; missing kinds are fitted on
    the training records (the configured model honours ``model_path``).
    """
    records = records if records is not None else evaluation_records(cfg)
    models = dict(models or {})
    if cfg.model not in models and cfg.model_path is not None:
        models[cfg.model] = _load_model(cfg)
    need = [k for k in MODELS if k not in models]
    if need:
        train_records = train_records if train_records is not None else training_records(cfg)
        for k in need:
            models[k] = train_model(cfg, train_records, kind=k)[0]
    cond = records[0].frame.condition
    series = {}
    for kind in ("constant", "baseline", "kse"):
        meas = measurements_for(records, models[kind])
        for m in _series_methods(models[kind]):
            series[m] = uq_series(records, meas, m, cond)
    return series


def uq_summary(series):
    """Coverage at the credibility levels and the annotated percentiles per method."""
    out = {}
    for m, s in series.items():
        tab = ev.calibration_histogram(s)
        out[m] = {
            "frames": int(s.values.size),
            "coverage": {f"{100 * lv:g}": 100.0 * s.coverage(lv) for lv in ev.CRED_LEVELS},
            "percentiles": {f"p{q:g}": v for q, v in tab.percentiles.items()},
            "chi2_percentiles": {f"p{q:g}": v for q, v in tab.reference_percentiles.items()},
        }
    return out


def write_uq_outputs(series, out_dir, bins=50, svg=True):
    """Histogram CSV (and SVG) per method plus ``uq_report.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for m, s in series.items():
        tab = ev.calibration_histogram(s, bins=bins)
        (out / f"hist_{m}.csv").write_text(tab.to_csv())
        if svg:
            (out / f"hist_{m}.svg").write_text(ev.histogram_svg(tab, title=f"{m} ({s.condition})"))
    (out / "uq_report.json").write_text(json.dumps(uq_summary(series), indent=2, sort_keys=True) + "\n")


REPORT_COLUMNS = ("run", "condition", "filter", "model", "K", "alpha", "d_err", "cred68", "cred95", "cred997", "n_r", "frames")


def collect_reports(root):
    """One row per ``report.json`` found below ``root``, sorted by path."""
    root = Path(root)
    rows = []
    for path in sorted(root.rglob("report.json")):
        d = json.loads(path.read_text())
        c = d.get("config", {})
        rows.append({
            "run": str(path.parent.relative_to(root)) or ".",
            "condition": d.get("condition", ""),
            "filter": c.get("filter", ""),
            "model": c.get("model", ""),
            "K": c.get("K", ""),
            "alpha": c.get("alpha", ""),
            **{k: d[k] for k in ("d_err", "cred68", "cred95", "cred997", "n_r", "frames")},
        })
    return rows


def write_report_table(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in REPORT_COLUMNS])
