import csv
import json

import numpy as np
import pytest

from gmloc import pipeline as pl
from gmloc.cli import main
from gmloc.kse import BaselineModel, init_params
from gmloc.pipeline import ConstantModel, PipelineConfig
from gmloc.scenario import default_profiles, export_jsonl, simulate

PROFILES = default_profiles()


@pytest.fixture(scope="module")
def night():
    return simulate(0, PROFILES["night"], 300.0, 0.5)


@pytest.fixture(scope="module")
def constant():
    train = []
    for j, name in enumerate(sorted(PROFILES)):
        train += simulate([0, 1, j], PROFILES[name], 300.0, 0.5)
    return pl.fit_constant(train)


def run(records, model, **kw):
    return pl.run_filter(records, pl.measurements_for(records, model), **kw)


class TestRunFilter:
    def test_no_gating_accepts_all(self, night, constant):
        r = run(night, constant, filter="spf", alpha=0.0)
        assert r.report.n_r == 0.0
        assert all(row["accepted"] == 1 for row in r.rows)
        assert len(r.rows) == len(night) == r.report.frames

    def test_spf_gsf_degenerate_equivalence(self, night, constant):
        a = run(night, constant, filter="spf")
        b = run(night, constant, filter="gsf", M_max=1)
        assert abs(a.d_err - b.d_err) < 1e-8
        assert all(row["n_hypotheses"] == 1 for row in b.rows)

    def test_gating_rejects_injected_outliers(self, night, constant):
        ungated = run(night, constant, filter="spf", alpha=0.0)
        gated = run(night, constant, filter="spf", alpha=0.99)
        assert gated.d_err < ungated.d_err
        rejected = np.array([row["accepted"] == 0 for row in gated.rows])
        outlier = np.array([r.outlier for r in night])
        # most injected outliers are caught
        assert rejected[outlier].mean() > 0.8

    def test_gm_gating_variants_run(self, night, constant):
        for f in ("spf+gm-gating", "gsf"):
            r = run(night[:80], constant, filter=f, alpha=0.975)
            assert np.isfinite(r.d_err) and 0 <= r.report.n_r < 1

    def test_errors(self, night, constant):
        meas = pl.measurements_for(night[:3], constant)
        with pytest.raises(ValueError):
            pl.run_filter(night[:1], meas[:1])
        with pytest.raises(ValueError):
            pl.run_filter(night[:3], meas, filter="ekf")
        with pytest.raises(TypeError):
            pl.measurements_for(night[:3], object())


class TestTrace:
    def test_csv_schema(self, tmp_path, night, constant):
        r = run(night[:20], constant, alpha=0.99)
        pl.write_trace_csv(r.rows, tmp_path / "t.csv")
        with open(tmp_path / "t.csv") as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == pl.TRACE_COLUMNS
        assert len(rows) == 21
        first = dict(zip(rows[0], rows[1]))
        assert float(first["t"]) == 0.0 and first["accepted"] in ("0", "1")
        x, y = float(first["x_est"]) - float(first["x_gt"]), float(first["y_est"]) - float(first["y_gt"])
        assert float(first["d_err"]) == pytest.approx(np.hypot(x, y))


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            PipelineConfig(filter="ekf")
        with pytest.raises(ValueError):
            PipelineConfig(model="oracle")
        with pytest.raises(ValueError):
            PipelineConfig(alpha=1.0)

    def test_json_overrides(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"seed": 3, "alpha": 0.99, "hidden": [4, 8, 4]}))
        cfg = PipelineConfig.from_json(tmp_path / "c.json", alpha=0.975, seed=None)
        assert cfg.seed == 3 and cfg.alpha == 0.975 and cfg.hidden == (4, 8, 4)

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"sed": 3}))
        with pytest.raises(ValueError, match="sed"):
            PipelineConfig.from_json(tmp_path / "c.json")

    def test_unknown_profile(self):
        with pytest.raises(ValueError, match="available"):
            pl.evaluation_records(PipelineConfig(profile="fog"))

    def test_training_records_cover_conditions(self):
        recs = pl.training_records(PipelineConfig(train_frames=30))
        assert len(recs) == 30
        assert {r.frame.condition for r in recs} == set(PROFILES)


class TestModelFiles:
    @pytest.mark.parametrize("kind", ["constant", "baseline", "kse"])
    def test_round_trip(self, tmp_path, kind, night):
        if kind == "constant":
            model, name = ConstantModel(4.5), "m.json"
        elif kind == "baseline":
            model, name = pl.train_model(PipelineConfig(), night, kind="baseline")[0], "m.json"
        else:
            model, name = init_params(K=2, Len=16, hidden=(4, 8, 4), seed=1), "m.npz"
        pl.save_model(model, tmp_path / name)
        again = pl.load_model(tmp_path / name)
        a = pl.measurements_for(night[:5], model)
        b = pl.measurements_for(night[:5], again)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.covs, y.covs)
            np.testing.assert_array_equal(x.weights, y.weights)

    def test_missing_and_wrong_kind(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            pl.load_model(tmp_path / "none.json")
        pl.save_model(ConstantModel(2.0), tmp_path / "c.json")
        cfg = PipelineConfig(model="baseline", model_path=str(tmp_path / "c.json"))
        with pytest.raises(ValueError, match="baseline"):
            pl._load_model(cfg)
        (tmp_path / "x.json").write_text("{}")
        with pytest.raises(ValueError):
            pl.load_model(tmp_path / "x.json")


def small_cfg(tmp_path, **kw):
    d = dict(
        seed=1, duration=20.0, train_frames=90, K=2, Len=32, hidden=(8, 16, 8), max_epochs=2,
        out_dir=str(tmp_path), alpha=0.99,
    )
    d.update(kw)
    return PipelineConfig(**d)


class TestRunPipeline:
    def test_outputs(self, tmp_path):
        res = pl.run_pipeline(small_cfg(tmp_path))
        rep = json.loads((tmp_path / "report.json").read_text())
        for k in ("d_err", "cred68", "cred95", "cred997", "n_r", "frames"):
            assert k in rep
        assert rep["config"]["K"] == 2 and rep["condition"] == "night"
        assert set(res.series) == {"gm-condensed", "gm-marginalized"}
        assert (tmp_path / "trace.csv").read_text().count("\n") == 42

    def test_bitwise_reproducible(self, tmp_path):
        for sub in ("a", "b"):
            pl.run_pipeline(small_cfg(tmp_path / sub, filter="gsf"))
        for name in ("trace.csv", "report.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_eval_uq_all_methods(self, tmp_path):
        series = pl.eval_uq(small_cfg(tmp_path))
        assert set(series) == {"constant", "baseline", "gm-condensed", "gm-marginalized"}
        pl.write_uq_outputs(series, tmp_path, bins=10)
        summary = json.loads((tmp_path / "uq_report.json").read_text())
        assert summary["constant"]["frames"] == 41
        assert (tmp_path / "hist_gm-marginalized.svg").exists()

    def test_collect_reports(self, tmp_path):
        for sub, f in (("r1", "spf"), ("r2", "spf+gm-gating")):
            pl.run_pipeline(small_cfg(tmp_path / sub, model="constant", filter=f))
        rows = pl.collect_reports(tmp_path)
        assert [r["run"] for r in rows] == ["r1", "r2"]
        pl.write_report_table(rows, tmp_path / "table.csv")
        with open(tmp_path / "table.csv") as f:
            table = list(csv.DictReader(f))
        assert table[1]["filter"] == "spf+gm-gating"


class TestCli:
    def test_end_to_end(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"duration": 10.0, "train_frames": 60, "Len": 32, "hidden": [8, 16, 8], "max_epochs": 1}))
        data = tmp_path / "data"
        assert main(["simulate", "--config", str(cfg), "--seed", "2", "--out-dir", str(data), "--train"]) == 0
        assert len((data / "records.jsonl").read_text().splitlines()) == 21
        assert main(["train", "--config", str(cfg), "--k", "2", "--train-dataset", str(data / "train.jsonl"),
                     "--out-dir", str(tmp_path / "model")]) == 0
        assert (tmp_path / "model" / "model.npz").exists()
        assert (tmp_path / "model" / "training_curve.csv").exists()
        args = ["--config", str(cfg), "--k", "2", "--dataset", str(data / "records.jsonl"),
                "--model-path", str(tmp_path / "model" / "model.npz")]
        assert main(["filter", *args, "--alpha", "0.99", "--filter", "spf", "--out-dir", str(tmp_path / "runs" / "a")]) == 0
        assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["frames"] == 21
        assert main(["eval-uq", *args, "--train-dataset", str(data / "train.jsonl"), "--out-dir", str(tmp_path / "uq")]) == 0
        assert (tmp_path / "uq" / "hist_constant.csv").exists()
        assert main(["report", "--out-dir", str(tmp_path / "runs")]) == 0
        assert "d_err" in capsys.readouterr().out
        assert (tmp_path / "runs" / "table.csv").exists()

    def test_errors_exit_nonzero(self, tmp_path, capsys):
        assert main(["filter", "--config", str(tmp_path / "missing.json")]) == 2
        assert "error" in capsys.readouterr().err
        assert main(["report", "--out-dir", str(tmp_path)]) == 2

    def test_constant_model_file_in_filter(self, tmp_path):
        recs = simulate(0, PROFILES["snowy"], 5.0, 0.5)
        export_jsonl(recs, tmp_path / "r.jsonl")
        pl.save_model(ConstantModel(3.0), tmp_path / "c.json")
        code = main(["filter", "--dataset", str(tmp_path / "r.jsonl"), "--model", "constant",
                     "--model-path", str(tmp_path / "c.json"), "--out-dir", str(tmp_path / "o")])
        assert code == 0
        assert json.loads((tmp_path / "o" / "report.json").read_text())["condition"] == "snowy"


def test_baseline_model_type(night):
    assert isinstance(pl.train_model(PipelineConfig(), night, kind="baseline")[0], BaselineModel)
