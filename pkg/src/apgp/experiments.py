"""Experiment runs: solver head-to-heads, GP training/prediction, invariant checks.

Every run writes into ``output_dir`` (overridable with ``APGP_OUTPUT_DIR``) a
``manifest.json`` plus its own artefacts. With ``deterministic=True`` BLAS is pinned to
one thread and all wall-clock fields are written as 0, so repeated runs are
byte-identical.
"""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import os
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .altproj import SelectionRule, StoppingCriteria, ap_inner_step, ap_solve, bcd_step_oracle
from .altproj import flops_formula, init_state, quadratic_objective, select_block
from .cg import cg_solve, make_preconditioner
from .data import Dataset, load_dataset, synth_dataset, write_csv
from .gp import TrainConfig, exact_predict_variance_nll, make_probes, predict_mean, train
from .kernels import KernelSpec, dense_kernel
from .partition import build_cache, make_partition
from .trace import SolverError, fmt

__all__ = [
    "StopConfig",
    "ExperimentConfig",
    "load_config",
    "output_dir",
    "build_dataset",
    "run_solver_benchmark",
    "run_training",
    "run_prediction",
    "run_check",
    "run_synth",
    "validate_metrics",
    "METRICS_SCHEMA",
]

OUTPUT_ENV = "APGP_OUTPUT_DIR"


@dataclass
class StopConfig:
    tolerance: float = 1.0
    max_epochs: int = 1000
    min_epochs: int = 11

    def criteria(self) -> StoppingCriteria:
        return StoppingCriteria(self.tolerance, self.max_epochs, self.min_epochs)


@dataclass
class ExperimentConfig:
    # data
    dataset: str | None = None
    split_ratio: float = 0.8
    standardize_features: bool = True
    synth_n: int = 2000
    synth_d: int = 5
    synth_lengthscale: float = 0.6
    synth_outputscale: float = 1.0
    synth_noise: float = 0.05
    # kernel (fixed hyperparameters for `solve`, initial values for `train`)
    kernel: str = "matern52"
    lengthscale: float = 0.6931471805599453
    outputscale: float = 0.6931471805599453
    noise_variance: float = 0.6932471805599453
    mean_constant: float = 0.0
    noise_floor: float = 1e-4
    # solvers
    solver: str = "ap"
    methods: list = field(default_factory=lambda: ["ap_gs", "cg"])
    batch_size: int = 100
    precond_rank: int = 500
    train_stop: StopConfig = field(default_factory=StopConfig)
    test_stop: StopConfig = field(default_factory=lambda: StopConfig(0.01, 1000, 11))
    # training
    steps: int = 50
    lr: float = 0.1
    num_probes: int = 15
    probe_kind: str = "rademacher"
    # run
    model_path: str | None = None
    output_dir: str = "apgp-out"
    seed: int = 0
    precision: str = "f64"
    deterministic: bool = False
    workers: int = 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        jsonschema.validate(d, CONFIG_SCHEMA)
        d = dict(d)
        for key in ("train_stop", "test_stop"):
            if key in d:
                d[key] = StopConfig(**d[key])
        cfg = cls(**d)
        cfg.check()
        return cfg

    def check(self):
        jsonschema.validate(self.to_dict(), CONFIG_SCHEMA)
        self.train_stop.criteria()
        self.test_stop.criteria()

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def content_dict(self) -> dict:
        """Everything that determines results; where the files go is left out."""
        d = self.to_dict()
        d.pop("output_dir")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.content_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def kernel_spec(self, d: int) -> KernelSpec:
        return KernelSpec(self.kernel, [self.lengthscale] * d, self.outputscale,
                          self.noise_variance, self.mean_constant, self.noise_floor)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, lr=self.lr, num_probes=self.num_probes,
                           solver=self.solver, batch_size=self.batch_size,
                           stop=self.train_stop.criteria(), precond_rank=self.precond_rank,
                           probe_kind=self.probe_kind, seed=self.seed)


_STOP_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "tolerance": {"type": "number", "exclusiveMinimum": 0},
        "max_epochs": {"type": "integer", "minimum": 1},
        "min_epochs": {"type": "integer", "minimum": 0},
    },
}

_METHODS = ["ap_gs", "ap_cyclic", "ap_random", "cg", "pcg"]

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset": {"type": ["string", "null"]},
        "split_ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "standardize_features": {"type": "boolean"},
        "synth_n": {"type": "integer", "minimum": 2},
        "synth_d": {"type": "integer", "minimum": 1},
        "synth_lengthscale": {"type": "number", "exclusiveMinimum": 0},
        "synth_outputscale": {"type": "number", "minimum": 0},
        "synth_noise": {"type": "number", "minimum": 0},
        "kernel": {"enum": ["matern52", "matern32", "rbf"]},
        "lengthscale": {"type": "number", "exclusiveMinimum": 0},
        "outputscale": {"type": "number", "minimum": 0},
        "noise_variance": {"type": "number", "exclusiveMinimum": 0},
        "mean_constant": {"type": "number"},
        "noise_floor": {"type": "number", "minimum": 0},
        "solver": {"enum": ["ap", "cg"]},
        "methods": {"type": "array", "items": {"enum": _METHODS}, "minItems": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "precond_rank": {"type": "integer", "minimum": 0},
        "train_stop": _STOP_SCHEMA,
        "test_stop": _STOP_SCHEMA,
        "steps": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "num_probes": {"type": "integer", "minimum": 1},
        "probe_kind": {"enum": ["rademacher", "gaussian_preconditioned"]},
        "model_path": {"type": ["string", "null"]},
        "output_dir": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "precision": {"enum": ["f32", "f64"]},
        "deterministic": {"type": "boolean"},
        "workers": {"type": "integer", "minimum": 1},
    },
}

METRICS_SCHEMA = {
    "type": "object",
    "required": ["rmse", "nll", "train_epochs_total", "train_wall_time", "predict_wall_time"],
    "properties": {
        "rmse": {"type": "number", "minimum": 0},
        "nll": {"type": ["number", "null"]},
        "train_epochs_total": {"type": "integer", "minimum": 0},
        "train_wall_time": {"type": "number", "minimum": 0},
        "predict_wall_time": {"type": "number", "minimum": 0},
    },
}


def validate_metrics(metrics: dict) -> dict:
    jsonschema.validate(metrics, METRICS_SCHEMA)
    return metrics


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a JSON config (or defaults) and apply ``{"a.b": value}`` style overrides."""
    d = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        if not isinstance(d, dict):
            raise ValueError("config file must hold a JSON object")
    base = ExperimentConfig().to_dict()
    merged = {**base, **d}
    for key in ("train_stop", "test_stop"):
        if isinstance(d.get(key), dict):
            merged[key] = {**base[key], **d[key]}
    for dotted, value in (overrides or {}).items():
        head, _, tail = dotted.partition(".")
        if tail:
            if not isinstance(merged.get(head), dict):
                raise ValueError(f"unknown config key {dotted!r}")
            merged[head] = {**merged[head], tail: value}
        else:
            merged[head] = value
    return ExperimentConfig.from_dict(merged)


def output_dir(config: ExperimentConfig) -> Path:
    out = Path(os.environ.get(OUTPUT_ENV) or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _version_string() -> str:
    try:
        here = Path(__file__).resolve().parent
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _dump_json(path: Path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(obj):
    # floats go out with 17 significant digits; json would otherwise use repr (shortest)
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return float(fmt(v)) if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _write_manifest(out: Path, config: ExperimentConfig, command: str, extra=None):
    manifest = {
        "command": command,
        "config": config.content_dict(),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "version": _version_string(),
        "precision": config.precision,
        "deterministic": config.deterministic,
        "numpy": np.__version__,
    }
    if extra:
        manifest.update(extra)
    _dump_json(out / "manifest.json", manifest)


@contextlib.contextmanager
def _threads(config: ExperimentConfig):
    if not config.deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled

    def since(self, t0: float) -> float:
        return time.perf_counter() - t0 if self.enabled else 0.0


def build_dataset(config: ExperimentConfig) -> Dataset:
    if config.dataset:
        return load_dataset(config.dataset, config.split_ratio, config.seed,
                            config.standardize_features)
    d = config.synth_d
    gen = KernelSpec(config.kernel, [config.synth_lengthscale] * d, config.synth_outputscale,
                     config.synth_noise, 0.0, noise_floor=0.0)
    return synth_dataset(config.synth_n, d, gen, config.seed, config.split_ratio,
                         standardize_features=False)


def _training_arrays(config: ExperimentConfig, ds: Dataset):
    dt = config.dtype
    return ds.X_train.astype(dt), ds.y_train.astype(dt)


# -- solve -----------------------------------------------------------------------------

def _run_method(method: str, spec, X, B, config: ExperimentConfig):
    stop = config.train_stop.criteria()
    if method.startswith("ap_"):
        rule = SelectionRule(method[3:], config.seed)
        return ap_solve(spec, X, B, min(config.batch_size, X.shape[0]), rule, stop)
    precond = None
    if method == "pcg" and config.precond_rank > 0:
        precond = make_preconditioner(spec, X, config.precond_rank)
    return cg_solve(spec, X, B, stop, precond)


def run_solver_benchmark(config: ExperimentConfig) -> dict:
    """Run every requested method on ``K W = [y - mu, z_1 .. z_l]`` and export traces.

    Writes ``trace_<method>.csv``, ``summary.json`` and ``manifest.json``. A failing
    method is recorded in the summary and the others still run.
    """
    out = output_dir(config)
    clock = _Clock(not config.deterministic)
    with _threads(config):
        ds = build_dataset(config)
        X, y = _training_arrays(config, ds)
        spec = config.kernel_spec(X.shape[1])
        probes = make_probes(y, spec.mean_constant, config.num_probes, config.seed)
        B = probes.B
        tol = config.train_stop.tolerance

        def one(method):
            t0 = time.perf_counter()
            try:
                _, tr = _run_method(method, spec, X, B, config)
            except (SolverError, np.linalg.LinAlgError, ValueError) as err:
                tr = getattr(err, "trace", None)
                if tr is not None:
                    tr.to_csv(out / f"trace_{method}.csv", wall_time=clock.enabled)
                return method, {"error": f"{type(err).__name__}: {err}"}
            tr.to_csv(out / f"trace_{method}.csv", wall_time=clock.enabled)
            return method, {
                "epochs_to_tolerance": tr.epochs_to_tolerance(tol),
                "flops_to_tolerance": tr.flops_to_tolerance(tol),
                "epochs_run": tr.epochs,
                "final_avg_rel_residual": tr.final_avg_rel,
                "converged": tr.converged,
                "stop_reason": tr.stop_reason,
                "total_flops": tr.total_flops,
                "wall_time_s": clock.since(t0),
            }

        if config.workers > 1:
            with ThreadPoolExecutor(config.workers) as pool:
                results = dict(pool.map(one, config.methods))
        else:
            results = dict(one(m) for m in config.methods)

    summary = {
        "n": int(X.shape[0]),
        "d": int(X.shape[1]),
        "batch_size": min(config.batch_size, X.shape[0]),
        "num_rhs": int(B.shape[1]),
        "tolerance": tol,
        "kernel": spec.to_dict(),
        "methods": results,
    }
    _dump_json(out / "summary.json", summary)
    _write_manifest(out, config, "solve")
    return summary


# -- train / predict --------------------------------------------------------------------

def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2)))


def _evaluate(spec, config: ExperimentConfig, ds: Dataset, clock: _Clock):
    X, y = _training_arrays(config, ds)
    Xt = ds.X_test.astype(config.dtype)
    t0 = time.perf_counter()
    mean, trace = predict_mean(spec, X, y, Xt, config.solver, config.test_stop.criteria(),
                               return_trace=True, batch_size=config.batch_size,
                               precond_rank=config.precond_rank)
    predict_time = clock.since(t0)
    nll = None
    if X.shape[0] <= 5000 and Xt.shape[0] > 0:
        _, nll = exact_predict_variance_nll(spec, X, Xt, ds.y_test, mean)
    rmse = _rmse(mean, ds.y_test) if Xt.shape[0] else 0.0
    return mean, trace, rmse, nll, predict_time


def run_training(config: ExperimentConfig) -> dict:
    """Train, predict on the test split and write model, log, predictions and metrics."""
    out = output_dir(config)
    clock = _Clock(not config.deterministic)
    with _threads(config):
        ds = build_dataset(config)
        X, y = _training_arrays(config, ds)
        init = config.kernel_spec(X.shape[1])
        t0 = time.perf_counter()
        log_path = out / "train_log.jsonl"
        with open(log_path, "w", encoding="utf-8") as log_fh:
            def log_record(rec):
                if not clock.enabled:
                    rec = {**rec, "wall_time_s": 0.0}
                log_fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")
                log_fh.flush()

            spec, log = train(X, y, init, config.train_config(), log_callback=log_record)
        train_time = clock.since(t0)
        mean, trace, rmse, nll, predict_time = _evaluate(spec, config, ds, clock)

    model = {"kernel": spec.to_dict(), "label_mean": ds.label_mean, "label_std": ds.label_std,
             "feature_mean": ds.feature_mean, "feature_std": ds.feature_std,
             "solver": config.solver, "config_hash": config.config_hash()}
    _dump_json(out / "model.json", model)
    write_csv(out / "predictions.csv", ds.X_test, mean, None)
    metrics = validate_metrics({
        "rmse": rmse,
        "nll": nll,
        "train_epochs_total": int(sum(r["solver_epochs_or_iters"] for r in log)),
        "train_wall_time": train_time,
        "predict_wall_time": predict_time,
        "predict_epochs": trace.epochs if trace is not None else 0,
    })
    _dump_json(out / "metrics.json", metrics)
    _write_manifest(out, config, "train")
    return metrics


def run_prediction(config: ExperimentConfig) -> dict:
    """Predict with a saved ``model.json`` on the configured dataset's test split."""
    if not config.model_path:
        raise ValueError("predict needs model_path")
    with open(config.model_path, encoding="utf-8") as fh:
        model = json.load(fh)
    spec = KernelSpec.from_dict(model["kernel"])
    out = output_dir(config)
    clock = _Clock(not config.deterministic)
    with _threads(config):
        ds = build_dataset(config)
        mean, trace, rmse, nll, predict_time = _evaluate(spec, config, ds, clock)
    write_csv(out / "predictions.csv", ds.X_test, mean, None)
    metrics = validate_metrics({"rmse": rmse, "nll": nll, "train_epochs_total": 0,
                                "train_wall_time": 0.0, "predict_wall_time": predict_time,
                                "predict_epochs": trace.epochs if trace is not None else 0})
    _dump_json(out / "metrics.json", metrics)
    _write_manifest(out, config, "predict")
    return metrics


def run_synth(config: ExperimentConfig) -> Path:
    """Write the configured synthetic dataset as ``synthetic.csv``."""
    out = output_dir(config)
    cfg = dataclasses.replace(config, dataset=None)
    ds = build_dataset(cfg)
    path = out / "synthetic.csv"
    write_csv(path, ds.X, ds.y)
    _write_manifest(out, config, "synth")
    return path


# -- check ------------------------------------------------------------------------------

def run_check(config: ExperimentConfig, max_n: int = 400, epochs: int = 5) -> dict:
    """Dense-oracle invariant suite on (the first ``max_n`` points of) the configured system."""
    out = output_dir(config)
    with _threads(config):
        ds = build_dataset(config)
        X, y = _training_arrays(config, ds)
        X = X[:max_n].astype(np.float64)
        y = y[:max_n].astype(np.float64)
        spec = config.kernel_spec(X.shape[1])
        n = X.shape[0]
        b = min(config.batch_size, n)
        B = make_probes(y, spec.mean_constant, config.num_probes, config.seed).B
        results = _check_suite(spec, X, B, b, epochs)
    report = {"n": n, "batch_size": b, "passed": all(r["passed"] for r in results.values()),
              "checks": results}
    _dump_json(out / "check.json", report)
    _write_manifest(out, config, "check")
    return report


def _check_suite(spec, X, B, b, epochs) -> dict:
    n = X.shape[0]
    K = dense_kernel(spec, X)
    Wstar = np.linalg.solve(K, B)
    hstar = -0.5 * float(np.sum(B * Wstar))
    part = make_partition(n, b)
    cache = build_cache(spec, X, part)
    res = {}

    # residual identity and monotone objective along a GS run
    state = init_state(B)
    bnorm = np.linalg.norm(B)
    gap0 = quadratic_objective(state.W, spec, X, B) - hstar
    worst_res, worst_rise = 0.0, -np.inf
    h_prev = quadratic_objective(state.W, spec, X, B)
    rule = SelectionRule("gs")
    for _ in range(epochs * part.m):
        j = select_block(rule, state.R, part, state.inner_iter)
        ap_inner_step(state, cache, spec, X, j)
        worst_res = max(worst_res, float(np.linalg.norm(state.R - (B - K @ state.W)) / bnorm))
        h = float(0.5 * np.sum(state.W * (K @ state.W)) - np.sum(B * state.W))
        worst_rise = max(worst_rise, (h - h_prev) / gap0)
        h_prev = h
    res["residual_identity"] = {"value": worst_res, "tolerance": 1e-6, "passed": worst_res <= 1e-6}
    res["monotone_objective"] = {"value": worst_rise, "tolerance": 1e-12, "passed": worst_rise <= 1e-12}

    # AP and BCD iterates coincide for the same block sequence
    state = init_state(B)
    W_bcd = np.zeros_like(B)
    worst = 0.0
    for it in range(2 * part.m):
        j = it % part.m
        ap_inner_step(state, cache, spec, X, j)
        W_bcd = bcd_step_oracle(W_bcd, spec, X, B, part.block(j))
        worst = max(worst, float(np.linalg.norm(state.W - W_bcd) / max(np.linalg.norm(W_bcd), 1e-300)))
    res["ap_equals_bcd"] = {"value": worst, "tolerance": 1e-10, "passed": worst <= 1e-10}

    # linear-rate envelope with kappa' from dense eigenvalues
    lam_min = float(np.linalg.eigvalsh(K)[0])
    lam_blk = max(float(np.linalg.eigvalsh(K[sl, sl])[-1]) for sl in map(part.block, range(part.m)))
    kappa_p = lam_blk / lam_min
    E0 = Wstar
    err0 = float(np.sum(E0 * (K @ E0)))
    worst_ratio = 0.0

    def on_epoch(st):
        nonlocal worst_ratio
        E = st.W - Wstar
        errt = float(np.sum(E * (K @ E)))
        worst_ratio = max(worst_ratio, errt / (np.exp(-st.epoch / kappa_p) * err0))

    ap_solve(spec, X, B, part, "gs", StoppingCriteria(1e-300, epochs, epochs), cache=cache,
             on_epoch=on_epoch)
    res["linear_rate_envelope"] = {"value": worst_ratio, "kappa_prime": kappa_p,
                                   "tolerance": 1 + 1e-8, "passed": worst_ratio <= 1 + 1e-8}

    # one block covering everything is a direct solve
    full = build_cache(spec, X, make_partition(n, n))
    st = init_state(B)
    ap_inner_step(st, full, spec, X, 0)
    rel = float(np.linalg.norm(st.R) / bnorm)
    res["full_block_collapse"] = {"value": rel, "tolerance": 1e-8, "passed": rel <= 1e-8}

    # per-epoch FLOPs against the closed form
    _, tr = ap_solve(spec, X, B, part, "gs", StoppingCriteria(1e-300, 2, 2), cache=cache)
    counted = float(tr.per_epoch_flops()[-1])
    expected = flops_formula(n, b, B.shape[1])
    dev = abs(counted - expected) / expected
    res["flops_per_epoch"] = {"value": counted, "expected": expected, "tolerance": 0.05,
                              "passed": dev <= 0.05 or n % b != 0}
    return res
