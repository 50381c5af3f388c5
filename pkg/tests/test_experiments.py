import json

import numpy as np
import pytest

from apgp import KernelSpec, StoppingCriteria, predict_mean, train
from apgp import experiments as ex
from apgp.cli import main
from apgp.trace import SolverError

SMALL = {"synth_n": 150, "synth_d": 2, "num_probes": 3, "batch_size": 30, "precond_rank": 20}


def cfg(tmp_path, **kw):
    return ex.load_config(None, {**SMALL, "output_dir": str(tmp_path), **kw})


def test_defaults_follow_protocol():
    c = ex.ExperimentConfig()
    assert (c.train_stop.tolerance, c.train_stop.min_epochs, c.train_stop.max_epochs) == (1.0, 11, 1000)
    assert c.test_stop.tolerance == 0.01
    assert (c.steps, c.lr, c.num_probes) == (50, 0.1, 15)
    assert c.noise_floor == 1e-4


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"batch_size": 64, "train_stop": {"tolerance": 0.5}}))
    c = ex.load_config(p, {"train_stop.max_epochs": 7, "train_stop.min_epochs": 2, "kernel": "rbf"})
    assert c.batch_size == 64 and c.kernel == "rbf"
    assert (c.train_stop.tolerance, c.train_stop.max_epochs, c.train_stop.min_epochs) == (0.5, 7, 2)
    assert c.test_stop.tolerance == 0.01


@pytest.mark.parametrize("bad", [{"batch_sise": 3}, {"train_stop": {"tol": 1}}, {"precision": "f16"},
                                 {"batch_size": 0}, {"methods": ["lanczos"]}])
def test_config_rejects(tmp_path, bad):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(bad))
    with pytest.raises(Exception):
        ex.load_config(p)


def test_min_over_max_epochs_rejected():
    with pytest.raises(ValueError):
        ex.load_config(None, {"train_stop.max_epochs": 3})


def test_identity_kernel_benchmark(tmp_path):
    c = cfg(tmp_path, outputscale=0.0, noise_variance=1.0, methods=["ap_gs", "cg"],
            **{"train_stop.min_epochs": 0})
    s = ex.run_solver_benchmark(c)
    assert s["methods"]["ap_gs"]["epochs_to_tolerance"] == 1
    assert s["methods"]["cg"]["epochs_to_tolerance"] == 1


def test_rules_share_initial_residual(tmp_path):
    c = cfg(tmp_path, methods=["ap_gs", "ap_cyclic", "ap_random", "cg", "pcg"])
    s = ex.run_solver_benchmark(c)
    firsts = {tuple((tmp_path / f"trace_{m}.csv").read_text().splitlines()[1].split(",")[2:4])
              for m in s["methods"]}
    assert len(firsts) == 1
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config_hash"] == c.config_hash() and manifest["precision"] == "f64"
    assert manifest["version"].startswith("0.1.0")


def test_failing_method_recorded(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise SolverError("synthetic failure")

    monkeypatch.setattr(ex, "cg_solve", boom)
    s = ex.run_solver_benchmark(cfg(tmp_path, methods=["cg", "ap_gs"]))
    assert "synthetic failure" in s["methods"]["cg"]["error"]
    assert s["methods"]["ap_gs"]["converged"]


def test_workers_match_sequential(tmp_path):
    kw = {"methods": ["ap_gs", "ap_cyclic", "cg"], "deterministic": True}
    a = ex.run_solver_benchmark(cfg(tmp_path / "a", **kw))
    b = ex.run_solver_benchmark(cfg(tmp_path / "b", workers=3, **kw))
    assert a == b


def test_float32_run(tmp_path):
    s = ex.run_solver_benchmark(cfg(tmp_path, precision="f32", methods=["ap_gs", "cg"]))
    assert all("error" not in m for m in s["methods"].values())


def test_training_outputs(tmp_path):
    m = ex.run_training(cfg(tmp_path, steps=2))
    assert ex.validate_metrics(json.loads((tmp_path / "metrics.json").read_text())) == \
        json.loads(json.dumps(m))
    log = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [0, 1]
    assert set(log[0]) == {"step", "hyperparameters", "solver_epochs_or_iters",
                           "avg_rel_residual_at_stop", "cumulative_flops", "wall_time_s"}
    model = json.loads((tmp_path / "model.json").read_text())
    KernelSpec.from_dict(model["kernel"])
    with pytest.raises(Exception):
        ex.validate_metrics({"rmse": -1.0})


def test_predict_from_saved_model(tmp_path):
    train_m = ex.run_training(cfg(tmp_path / "t", steps=1))
    pm = ex.run_prediction(cfg(tmp_path / "p", model_path=str(tmp_path / "t" / "model.json")))
    assert pm["rmse"] == pytest.approx(train_m["rmse"], rel=1e-12)


def test_interpolation_sanity():
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(200, 2))
    y = np.sin(3 * X[:, 0]) * np.cos(2 * X[:, 1])
    init = KernelSpec("matern52", [0.5, 0.5], 1.0, 1e-4)
    spec, _ = train(X, y, init, ex.TrainConfig(steps=0))
    m = predict_mean(spec, X, y, X, "cg", StoppingCriteria(1e-8, 5000, 0))
    assert np.sqrt(np.mean((m - y) ** 2)) <= 0.01


def test_check_suite(tmp_path):
    r = ex.run_check(cfg(tmp_path, noise_variance=0.1), max_n=100, epochs=3)
    assert r["passed"], r


def test_cli_end_to_end(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(ex.OUTPUT_ENV, str(tmp_path / "env"))
    flags = ["--synth_n", "120", "--synth_d", "2", "--num_probes", "2", "--batch_size", "25"]
    assert main(["solve", *flags, "--methods", "ap_gs,cg", "--deterministic", "true"]) == 0
    assert (tmp_path / "env" / "trace_ap_gs.csv").exists()
    out = json.loads(capsys.readouterr().out)
    assert set(out["methods"]) == {"ap_gs", "cg"}
    assert main(["synth", *flags]) == 0
    assert (tmp_path / "env" / "synthetic.csv").exists()
    assert main(["check", *flags, "--noise_variance", "0.1", "--max_n", "60", "--epochs", "2"]) == 0


def test_cli_errors_are_json(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(ex.OUTPUT_ENV, str(tmp_path))
    assert main(["train", "--dataset", str(tmp_path / "missing.csv")]) != 0
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "FileNotFoundError" and err["command"] == "train"
    with pytest.raises(SystemExit) as info:
        main(["solve", "--no_such_key", "1"])
    assert info.value.code != 0
    assert json.loads(capsys.readouterr().err)["error"] == "UsageError"


def test_cli_dataset_file(tmp_path, monkeypatch, capsys):
    rng = np.random.default_rng(0)
    from apgp.data import write_csv

    X = rng.uniform(size=(120, 3))
    write_csv(tmp_path / "d.csv", X, X @ [1.0, -0.5, 0.3] + 0.05 * rng.normal(size=120))
    monkeypatch.setenv(ex.OUTPUT_ENV, str(tmp_path / "o"))
    assert main(["train", "--dataset", str(tmp_path / "d.csv"), "--steps", "1", "--num_probes", "2",
                 "--batch_size", "16"]) == 0
    metrics = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert metrics["nll"] is not None and metrics["rmse"] < 0.5
