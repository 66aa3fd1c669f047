import csv
import json
import os
from dataclasses import replace

import numpy as np
import pytest

import pipeline
from sysid.model import Dataset
from sysid.plant import save_csv
from utils import storage
from utils.config import load_config
from utils.errors import ConfigError
from utils.reports import METRICS_FIELDS, SWEEP_FIELDS

SMALL = {
    "model.nx_hat": 1,
    "model.np_hat": 2,
    "model.units": 2,
    "lti.adam_iters": 300,
    "lti.adam_lr": 0.01,
    "lti.lbfgs_iters": 300,
    "qlpv.adam_iters": 20,
    "qlpv.adam_lr": 0.001,
    "qlpv.lbfgs_iters": 0,
    "concurrent.adam_iters": 5,
    "rci.horizon": 5,
    "rci.init_adam_iters": 50,
    "rci.init_lbfgs_iters": 50,
    "rci.rho_stop": 1000.0,
    "rci.y_fraction": 0.5,
    "kp_grid": [0.0, 1000.0],
    "tau_grid": [0.0, 1e-4],
}


def _lti_dataset(n, seed):
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, size=(n, 1))
    x, y = 0.0, np.zeros((n, 1))
    for t in range(n):
        y[t, 0] = x + 0.01 * rng.standard_normal()
        x = 0.8 * x + u[t, 0]
    return Dataset(u=u, y=y)


@pytest.fixture
def lti_csv(tmp_path):
    train, test = tmp_path / "lti_train.csv", tmp_path / "lti_test.csv"
    save_csv(_lti_dataset(200, 0), str(train))
    save_csv(_lti_dataset(100, 1), str(test))
    return str(train), str(test)


def _run(tmp_path, lti_csv, name="out", **overrides):
    config = load_config(None, {**SMALL, **overrides})
    return pipeline.prepare_run(config, str(tmp_path / name), seed=0, data_path=lti_csv[0], test_path=lti_csv[1])


def _metrics(run):
    with open(run.metrics_path, newline="") as f:
        return list(csv.DictReader(f))


def test_constraint_sets_come_from_training_range(tmp_path, lti_csv):
    run = _run(tmp_path, lti_csv)
    phys = run.train.physical()
    u_lo, u_hi = run.scaler.scale_u(phys.u.min(axis=0)), run.scaler.scale_u(phys.u.max(axis=0))
    np.testing.assert_allclose(run.U.vertices.min(axis=0), u_lo, atol=1e-12)
    np.testing.assert_allclose(run.U.vertices.max(axis=0), u_hi, atol=1e-12)
    y_width = run.Y.vertices.max(axis=0) - run.Y.vertices.min(axis=0)
    scaled_range = run.train.y.max(axis=0) - run.train.y.min(axis=0)
    np.testing.assert_allclose(y_width, scaled_range / 0.5, rtol=1e-12)
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["seed"] == 0
    assert manifest["config_hash"] == run.config_hash
    assert manifest["data"]["n_train"] == 200


def test_explicit_bounds_override_data(tmp_path, lti_csv):
    run = _run(tmp_path, lti_csv, **{"rci.u_lower": [-2.0], "rci.u_upper": [2.0],
                                     "rci.y_lower": [-5.0], "rci.y_upper": [5.0]})
    np.testing.assert_allclose(run.scaler.unscale_u(run.U.vertices.max(axis=0)), [2.0])
    np.testing.assert_allclose(run.scaler.unscale_y(run.Y.vertices.min(axis=0)), [-5.0])


def test_bad_bounds_are_config_errors(tmp_path, lti_csv):
    with pytest.raises(ConfigError):
        _run(tmp_path, lti_csv, **{"rci.u_lower": [1.0], "rci.u_upper": [-1.0]})


def test_fit_lti_stage_writes_artifact_and_metrics(tmp_path, lti_csv):
    run = _run(tmp_path, lti_csv)
    result = pipeline.run_stage(run, "fit_lti")
    assert result.model.n_x == 1
    assert result.metrics["bfr_train"] > 90.0
    assert result.metrics["bfr_test"] > 90.0

    path = storage.artifact_path(run.out_dir, "fit_lti")
    artifact = storage.load_artifact(path, "fit_lti")
    assert artifact["config_hash"] == run.config_hash
    assert artifact["seed"] == 0
    loaded = pipeline.load_stage(path, "fit_lti")
    np.testing.assert_array_equal(loaded.model.A, result.model.A)
    np.testing.assert_array_equal(loaded.disturbance.eps_w, result.disturbance.eps_w)

    rows = _metrics(run)
    assert list(rows[0]) == METRICS_FIELDS
    assert rows[0]["stage"] == "fit_lti"
    assert rows[0]["r_status"] == "skipped"
    assert float(rows[0]["bfr_train"]) == result.metrics["bfr_train"]


def test_stage_reads_predecessor_from_disk(tmp_path, lti_csv):
    pipeline.run_stage(_run(tmp_path, lti_csv), "fit_lti")
    fresh = _run(tmp_path, lti_csv)
    assert fresh.results == {}
    prev = pipeline._require(fresh, "fit_lti")
    assert prev.stage == "fit_lti"
    assert "fit_lti" in fresh.results


def test_results_of_this_run_beat_older_model_files(tmp_path, lti_csv):
    run = _run(tmp_path, lti_csv)
    lti = pipeline.run_stage(run, "fit_lti")
    pipeline._save(run, replace(lti, stage="reduce"))
    run.results["fit_qlpv"] = replace(lti, stage="fit_qlpv")
    assert pipeline._latest_model(run, "fit_concurrent") is run.results["fit_qlpv"]
    assert "reduce" not in run.results


def test_disabled_stage_files_are_ignored(tmp_path, lti_csv):
    run = _run(tmp_path, lti_csv)
    lti = pipeline.run_stage(run, "fit_lti")
    for stage in ("init_rci", "fit_qlpv", "reduce"):
        pipeline._save(run, replace(lti, stage=stage))

    fresh = _run(tmp_path, lti_csv, **{"stages.reduce": False, "stages.init_rci": False})
    assert pipeline._latest_model(fresh, "fit_concurrent").stage == "fit_qlpv"
    assert pipeline._optional(fresh, "init_rci") is None

    enabled = _run(tmp_path, lti_csv, **{"stages.reduce": True})
    assert pipeline._latest_model(enabled, "fit_concurrent").stage == "reduce"


def test_section_seed_overrides_run_seed(tmp_path, lti_csv):
    quick = {"lti.adam_iters": 5, "lti.lbfgs_iters": 0}
    fits = {}
    for name, seed in (("default", None), ("zero", 0), ("one", 1)):
        run = _run(tmp_path, lti_csv, name=name, **quick, **{"lti.seed": seed})
        fits[name] = pipeline.run_stage(run, "fit_lti").model
    np.testing.assert_array_equal(fits["default"].A, fits["zero"].A)
    assert not np.array_equal(fits["zero"].A, fits["one"].A)


def test_missing_predecessor_names_the_stage(tmp_path, lti_csv):
    run = _run(tmp_path, lti_csv)
    with pytest.raises(ConfigError) as info:
        pipeline.run_stage(run, "reduce")
    assert info.value.stage == "reduce"
    assert info.value.exit_code == 2


def test_reruns_reproduce_metrics(tmp_path, lti_csv):
    paths = []
    for name in ("a", "b"):
        run = _run(tmp_path, lti_csv, name=name)
        pipeline.run_stage(run, "fit_lti")
        paths.append(run.metrics_path)
    with open(paths[0], "rb") as a, open(paths[1], "rb") as b:
        assert a.read() == b.read()


def test_evaluate_reports_both_modes(tmp_path, lti_csv):
    run = _run(tmp_path, lti_csv)
    result = pipeline.run_stage(run, "fit_lti")
    metrics = pipeline.evaluate(result.model, run.train, run.test)
    assert set(metrics) == {"bfr_train", "bfr_test", "bfr_train_observer", "bfr_test_observer"}
    # K = 0 for the LTI model, so the observer replays the prediction
    assert metrics["bfr_train_observer"] == pytest.approx(metrics["bfr_train"], abs=1e-9)


def test_sweep_kp_rows_and_group_counts(tmp_path, lti_csv):
    run = _run(tmp_path, lti_csv)
    pipeline.run_stage(run, "fit_lti")
    rows = pipeline.sweep_kp(run)
    assert [r["kappa_p"] for r in rows] == [0.0, 1000.0]
    assert rows[0]["nonzero_groups"] >= rows[-1]["nonzero_groups"]
    assert rows[-1]["nonzero_groups"] == 0
    with open(os.path.join(run.out_dir, "sweep_kp.csv"), newline="") as f:
        written = list(csv.DictReader(f))
    assert len(written) == 2
    assert list(written[0]) == SWEEP_FIELDS


def test_disabled_stages_are_skipped(tmp_path, lti_csv):
    stages = {s: s == "fit_lti" for s in ("fit_lti", "init_rci", "fit_qlpv", "reduce", "fit_concurrent",
                                          "control_sim")}
    config = load_config(None, {**SMALL, "stages": stages})
    run = pipeline.run_pipeline(config, str(tmp_path / "out"), seed=0, data_path=lti_csv[0], test_path=lti_csv[1])
    assert set(run.results) == {"fit_lti"}
    assert not os.path.exists(storage.artifact_path(run.out_dir, "fit_qlpv"))


@pytest.mark.slow
def test_full_pipeline_on_lti_data(tmp_path, lti_csv):
    stages = {s: s != "control_sim" for s in ("fit_lti", "init_rci", "fit_qlpv", "reduce", "fit_concurrent",
                                              "control_sim")}
    config = load_config(None, {**SMALL, "stages": stages, "reduce.target_np": 1})
    run = pipeline.run_pipeline(config, str(tmp_path / "out"), seed=0, data_path=lti_csv[0], test_path=lti_csv[1])
    assert run.results["init_rci"].solution.optimal
    assert run.results["fit_qlpv"].solution.optimal
    assert run.results["reduce"].model.n_p == 1
    assert np.isfinite(run.results["fit_concurrent"].r_value)
    assert [r["stage"] for r in _metrics(run)] == ["fit_lti", "init_rci", "fit_qlpv", "reduce", "fit_concurrent"]


@pytest.mark.slow
def test_trigonometric_lti_baseline(tmp_path):
    config = load_config("configs/trig.json", {"stages": {"fit_lti": True, "fit_qlpv": False}})
    run = pipeline.prepare_run(config, str(tmp_path / "trig"), seed=0)
    result = pipeline.run_stage(run, "fit_lti")
    assert 60.0 <= result.metrics["bfr_train"] <= 75.0


@pytest.mark.parametrize("path, nx, n_p, units", [
    ("configs/trig.json", 3, 3, 6),
    ("configs/trig_kp.json", 2, 10, 3),
])
def test_shipped_trigonometric_setups(path, nx, n_p, units):
    config = load_config(path)
    assert (config.model.nx_hat, config.model.np_hat) == (nx, n_p)
    assert (config.model.hidden_layers, config.model.units) == (1, units)


@pytest.mark.slow
def test_trigonometric_kappa_p_sweep_recovers_lti(tmp_path):
    config = load_config("configs/trig_kp.json")
    run = pipeline.prepare_run(config, str(tmp_path / "trig_kp"), seed=0)
    pipeline.run_stage(run, "fit_lti")
    rows = pipeline.sweep_kp(run)
    counts = [r["nonzero_groups"] for r in rows]
    assert counts == sorted(counts, reverse=True)
    assert rows[-1]["kappa_p"] == 1.0
    assert counts[-1] == 0
