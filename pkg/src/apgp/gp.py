"""Exact GP regression driven by iterative solves.

Hyperparameters are optimised in an unconstrained ("raw") space:

    lengthscale_j  = softplus(raw_j)
    outputscale    = softplus(raw_s)
    noise_variance = noise_floor + softplus(raw_n)
    mean_constant  = raw_mu

and the gradient of the negative marginal log likelihood is estimated from one batched
solve ``K W = [y - mu, z_1, ..., z_l]``:

    d/dθ ≈ -1/2 w_0' dK w_0 + 1/(2l) Σ_i w_i' dK z_i
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .altproj import SelectionRule, StoppingCriteria, ap_solve
from .cg import PivotedCholeskyFactor, cg_solve, make_preconditioner, precond_solve
from .kernels import (
    KernelFamily,
    KernelSpec,
    base_from_sqdist,
    cross_block,
    cross_matvec,
    dense_kernel,
    scaled_sqdist,
    SQRT3,
    SQRT5,
)

__all__ = [
    "param_names",
    "spec_to_raw",
    "raw_to_spec",
    "kernel_gradient_block",
    "ProbeKind",
    "TraceProbeSet",
    "make_probes",
    "solve_system",
    "mll_gradient_estimate",
    "exact_mll",
    "exact_mll_gradient",
    "TrainConfig",
    "Adam",
    "train",
    "predict_mean",
    "exact_predict_variance_nll",
]

LOG2PI = np.log(2 * np.pi)


# -- parameterisation -----------------------------------------------------------------

def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def _softplus_slope(value):
    # d softplus(x)/dx expressed through y = softplus(x)
    return -np.expm1(-np.asarray(value, dtype=float))


def param_names(d: int) -> list[str]:
    return ["mean_constant"] + [f"lengthscale_{j}" for j in range(d)] + ["outputscale", "noise_variance"]


def spec_to_raw(spec: KernelSpec) -> np.ndarray:
    excess = spec.noise_variance - spec.noise_floor
    return np.concatenate([
        [spec.mean_constant],
        inv_softplus(spec.lengthscales),
        [inv_softplus(spec.outputscale)],
        [inv_softplus(excess) if excess > 0 else -np.inf],
    ])


def raw_to_spec(raw, family, noise_floor: float = 1e-4) -> KernelSpec:
    raw = np.asarray(raw, dtype=float)
    return KernelSpec(
        family=family,
        lengthscales=softplus(raw[1:-2]),
        outputscale=float(softplus(raw[-2])),
        noise_variance=noise_floor + float(softplus(raw[-1])),
        mean_constant=float(raw[0]),
        noise_floor=noise_floor,
    )


def _chain_factors(spec: KernelSpec) -> np.ndarray:
    """d(constrained)/d(raw) for every parameter, in ``param_names`` order."""
    return np.concatenate([
        [1.0],
        _softplus_slope(spec.lengthscales),
        [_softplus_slope(spec.outputscale)],
        [_softplus_slope(spec.noise_variance - spec.noise_floor)],
    ])


def _param_index(spec: KernelSpec, param) -> int:
    names = param_names(spec.d)
    if isinstance(param, (int, np.integer)):
        if not 0 <= param < len(names):
            raise KeyError(f"unknown hyperparameter index {param}")
        return int(param)
    if param not in names:
        raise KeyError(f"unknown hyperparameter {param!r}; expected one of {names}")
    return names.index(param)


# -- kernel derivatives ---------------------------------------------------------------

def _radial_slope(family: KernelFamily, r2: np.ndarray) -> np.ndarray:
    """``-(1/r) d k_base / dr``, finite at r = 0."""
    if family is KernelFamily.RBF:
        return np.exp(-0.5 * r2)
    r = np.sqrt(np.maximum(r2, 0))
    if family is KernelFamily.MATERN52:
        return (5.0 / 3.0) * (1 + SQRT5 * r) * np.exp(-SQRT5 * r)
    return 3.0 * np.exp(-SQRT3 * r)


def _gradient_panels(spec: KernelSpec, A: np.ndarray, B: np.ndarray, same: np.ndarray | None,
                     raw: bool = True, which=None):
    """dK/dθ between rows of A and B for each requested parameter index."""
    d = spec.d
    nparam = d + 3
    which = range(nparam) if which is None else which
    chain = _chain_factors(spec) if raw else np.ones(nparam)
    r2 = scaled_sqdist(spec.lengthscales, A, B)
    out = {}
    slope = None
    for i in which:
        if i == 0:
            out[i] = np.zeros_like(r2)
        elif i <= d:
            j = i - 1
            if slope is None:
                slope = spec.outputscale * _radial_slope(spec.family, r2)
            ls = spec.lengthscales[j]
            diff = A[:, j, None] - B[None, :, j]
            out[i] = slope * (diff * diff) * (chain[i] / ls ** 3)
        elif i == d + 1:
            out[i] = base_from_sqdist(spec.family, r2) * chain[i]
        else:
            M = np.zeros_like(r2)
            if same is not None:
                M[same] = chain[i]
            out[i] = M
    return out


def _same_mask(n: int, rows, cols):
    ra = np.arange(n)[rows]
    ca = np.arange(n)[cols]
    return ra[:, None] == ca[None, :]


def kernel_gradient_block(spec: KernelSpec, X: np.ndarray, rows, cols, param, raw: bool = True) -> np.ndarray:
    """Entrywise derivative of ``K[rows, cols]`` with respect to one hyperparameter.

    ``param`` is a name from :func:`param_names` (or its index). With ``raw=True`` the
    derivative is taken with respect to the unconstrained parameter.
    """
    X = np.asarray(X)
    n = X.shape[0]
    rows = slice(None) if rows is None else rows
    cols = slice(None) if cols is None else cols
    i = _param_index(spec, param)
    same = _same_mask(n, rows, cols)
    return _gradient_panels(spec, X[rows], X[cols], same, raw, [i])[i]


def dense_kernel_gradients(spec: KernelSpec, X: np.ndarray, raw: bool = True) -> list[np.ndarray]:
    n = X.shape[0]
    panels = _gradient_panels(spec, X, X, np.eye(n, dtype=bool), raw)
    return [panels[i] for i in range(spec.d + 3)]


# -- probes ---------------------------------------------------------------------------

class ProbeKind(str, enum.Enum):
    RADEMACHER = "rademacher"
    GAUSSIAN_PRECONDITIONED = "gaussian_preconditioned"


@dataclass
class TraceProbeSet:
    """Right-hand sides ``B = [y - mu, z_1 .. z_l]`` for one gradient estimate.

    ``right`` holds the vectors paired with the solves in the trace term: the probes
    themselves for Rademacher, ``P^{-1} z`` for probes drawn from ``N(0, P)``.
    """

    B: np.ndarray
    right: np.ndarray
    probe_kind: ProbeKind
    seed: int | None = None

    @property
    def num_probes(self) -> int:
        return self.B.shape[1] - 1


def make_probes(y: np.ndarray, mean_constant: float, num_probes: int, rng, *,
                kind=ProbeKind.RADEMACHER, preconditioner: PivotedCholeskyFactor | None = None,
                sigma2: float | None = None, seed=None) -> TraceProbeSet:
    kind = ProbeKind(kind)
    if num_probes < 1:
        raise ValueError("need at least one probe")
    rng = np.random.default_rng(rng)
    y = np.asarray(y)
    n = y.shape[0]
    if kind is ProbeKind.RADEMACHER:
        Z = rng.choice(np.array([-1.0, 1.0], dtype=y.dtype), size=(n, num_probes))
        right = Z
    else:
        if sigma2 is None:
            raise ValueError("preconditioned probes need sigma2")
        Z = np.sqrt(sigma2) * rng.standard_normal((n, num_probes))
        if preconditioner is not None and preconditioner.rank > 0:
            Z += preconditioner.L @ rng.standard_normal((preconditioner.rank, num_probes))
        right = precond_solve(preconditioner, sigma2, Z)
    B = np.column_stack([y - mean_constant, Z]).astype(y.dtype, copy=False)
    return TraceProbeSet(B, right, kind, seed)


# -- solves and the gradient ----------------------------------------------------------

def solve_system(spec: KernelSpec, X: np.ndarray, B: np.ndarray, solver: str = "ap",
                 stop: StoppingCriteria | None = None, *, batch_size: int = 500, rule="gs",
                 preconditioner: PivotedCholeskyFactor | None = None, precond_rank: int = 0,
                 seed: int | None = None, block_rows: int = 1024):
    """Dispatch ``K W = B`` to ``"ap"``, ``"cg"`` or ``"dense"`` (Cholesky; trace is None)."""
    if solver == "ap":
        return ap_solve(spec, X, B, min(batch_size, X.shape[0]), SelectionRule.parse(rule, seed), stop)
    if solver == "cg":
        if preconditioner is None and precond_rank > 0:
            preconditioner = make_preconditioner(spec, X, precond_rank)
        return cg_solve(spec, X, B, stop, preconditioner, block_rows=block_rows)
    if solver == "dense":
        K = dense_kernel(spec, X)
        return cho_solve(cho_factor(K, lower=True), B), None
    raise ValueError(f"unknown solver {solver!r}")


def assemble_gradient(spec: KernelSpec, X: np.ndarray, W: np.ndarray, right: np.ndarray,
                      block_rows: int = 512) -> np.ndarray:
    """Raw-space gradient from the solves ``W`` and the trace-term vectors ``right``."""
    n = X.shape[0]
    w0 = W[:, 0]
    Wz = W[:, 1:]
    l = Wz.shape[1]
    V = np.column_stack([w0, right])
    nparam = spec.d + 3
    quad = np.zeros(nparam)
    trc = np.zeros(nparam)
    idx = np.arange(n)
    for s in range(0, n, block_rows):
        e = min(s + block_rows, n)
        same = idx[s:e, None] == idx[None, :]
        panels = _gradient_panels(spec, X[s:e], X, same, True, range(1, nparam))
        for i, P in panels.items():
            Q = P @ V
            quad[i] += w0[s:e] @ Q[:, 0]
            trc[i] += np.sum(Wz[s:e] * Q[:, 1:])
    grad = -0.5 * quad + trc / (2.0 * l)
    grad[0] = -np.sum(w0)
    return grad


def mll_gradient_estimate(spec: KernelSpec, X: np.ndarray, y: np.ndarray, probes: TraceProbeSet,
                          solver: str = "ap", stop: StoppingCriteria | None = None, **solver_kw):
    """Stochastic gradient of the negative MLL in raw parameter space.

    Returns ``(gradient, trace)``; ``trace`` is ``None`` for the dense solver.
    """
    block_rows = solver_kw.pop("grad_block_rows", 512)
    W, trace = solve_system(spec, X, probes.B, solver, stop, **solver_kw)
    W = np.asarray(W, dtype=float)
    return assemble_gradient(spec, X, W, probes.right, block_rows), trace


def exact_mll(spec: KernelSpec, X: np.ndarray, y: np.ndarray) -> float:
    """Negative log marginal likelihood, constants included (dense Cholesky)."""
    K = dense_kernel(spec, np.asarray(X, dtype=float))
    r = np.asarray(y, dtype=float) - spec.mean_constant
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError("kernel matrix is not positive definite") from err
    a = solve_triangular(L, r, lower=True)
    return float(0.5 * (a @ a) + np.sum(np.log(np.diag(L))) + 0.5 * r.size * LOG2PI)


def exact_mll_gradient(spec: KernelSpec, X: np.ndarray, y: np.ndarray, raw: bool = True) -> np.ndarray:
    """Closed-form gradient ``-1/2 a' dK a + 1/2 tr(K^{-1} dK)`` with dense linear algebra."""
    X = np.asarray(X, dtype=float)
    K = dense_kernel(spec, X)
    cf = cho_factor(K, lower=True)
    alpha = cho_solve(cf, np.asarray(y, dtype=float) - spec.mean_constant)
    Kinv = cho_solve(cf, np.eye(K.shape[0]))
    grads = dense_kernel_gradients(spec, X, raw)
    out = np.array([-0.5 * alpha @ G @ alpha + 0.5 * np.sum(Kinv * G) for G in grads])
    out[0] = -np.sum(alpha)
    return out


# -- training -------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 50
    lr: float = 0.1
    num_probes: int = 15
    solver: str = "ap"
    batch_size: int = 500
    rule: str = "gs"
    stop: StoppingCriteria = field(default_factory=StoppingCriteria.training)
    precond_rank: int = 500
    probe_kind: str = "rademacher"
    seed: int = 0

    def __post_init__(self):
        if self.num_probes < 1:
            raise ValueError("num_probes must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.solver not in ("ap", "cg", "dense"):
            raise ValueError(f"unknown solver {self.solver!r}")
        ProbeKind(self.probe_kind)


class Adam:
    """Adam with bias correction."""

    def __init__(self, lr=0.1, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train(data, y=None, init_spec: KernelSpec | None = None, config: TrainConfig | None = None,
          log_callback=None):
    """Fit hyperparameters with Adam on stochastic MLL gradients.

    ``data`` is either a :class:`~apgp.data.Dataset` (its standardised training split is
    used; then pass ``init_spec`` and ``config`` by keyword) or an input matrix with
    labels ``y``.

    Every step draws fresh probes, rebuilds the solver's cache (Cholesky blocks or
    preconditioner) for the current hyperparameters, solves once and takes one Adam step.

    Returns ``(spec, log)`` where ``log`` holds one dict per optimiser step.
    """
    if hasattr(data, "X_train"):
        X, y = data.X_train, data.y_train
    else:
        X = data
    if init_spec is None:
        raise ValueError("init_spec is required")
    config = config or TrainConfig()
    X = np.asarray(X)
    y = np.asarray(y, dtype=X.dtype)
    rng = np.random.default_rng(config.seed)
    spec = init_spec
    raw = spec_to_raw(spec)
    if not np.all(np.isfinite(raw)):
        # noise exactly at the floor: nudge into the interior of the raw space
        spec = spec.replace(noise_variance=spec.noise_floor + 1e-6)
        raw = spec_to_raw(spec)
    opt = Adam(config.lr)
    log = []
    flops = 0.0
    t0 = time.perf_counter()
    for step in range(config.steps):
        precond = None
        if config.solver == "cg" and config.precond_rank > 0:
            precond = make_preconditioner(spec, X, config.precond_rank)
        probes = make_probes(y, spec.mean_constant, config.num_probes, rng,
                             kind=config.probe_kind, preconditioner=precond,
                             sigma2=spec.noise_variance)
        grad, trace = mll_gradient_estimate(
            spec, X, y, probes, config.solver, config.stop, batch_size=config.batch_size,
            rule=config.rule, preconditioner=precond, seed=config.seed + step)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient at step {step}")
        record = {
            "step": step,
            "hyperparameters": _hyper_dict(spec),
            "solver_epochs_or_iters": trace.epochs if trace is not None else 0,
            "avg_rel_residual_at_stop": trace.final_avg_rel if trace is not None else 0.0,
        }
        if trace is not None:
            flops += trace.total_flops
        record["cumulative_flops"] = flops
        record["wall_time_s"] = time.perf_counter() - t0
        log.append(record)
        if log_callback is not None:
            log_callback(record)
        raw = opt.step(raw, grad)
        spec = raw_to_spec(raw, spec.family, spec.noise_floor)
    return spec, log


def _hyper_dict(spec: KernelSpec) -> dict:
    return {
        "mean_constant": spec.mean_constant,
        "lengthscales": [float(v) for v in spec.lengthscales],
        "outputscale": spec.outputscale,
        "noise_variance": spec.noise_variance,
    }


# -- prediction -----------------------------------------------------------------------

def predict_mean(spec: KernelSpec, X_train: np.ndarray, y: np.ndarray, X_test: np.ndarray,
                 solver: str = "ap", stop: StoppingCriteria | None = None, *,
                 return_trace: bool = False, block_rows: int = 1024, **solver_kw):
    """Posterior mean ``mu + k(X_test, X) K^{-1} (y - mu)``; the cross-covariance has no noise."""
    stop = stop or StoppingCriteria.test_time()
    X_train = np.asarray(X_train)
    r = np.asarray(y, dtype=X_train.dtype) - spec.mean_constant
    w, trace = solve_system(spec, X_train, r, solver, stop, **solver_kw)
    mean = spec.mean_constant + cross_matvec(spec, np.asarray(X_test, dtype=X_train.dtype),
                                             X_train, w, block_rows)
    return (mean, trace) if return_trace else mean


def exact_predict_variance_nll(spec: KernelSpec, X_train: np.ndarray, X_test: np.ndarray,
                               y_test: np.ndarray, means: np.ndarray):
    """Predictive variances (latent variance + noise) and mean Gaussian NLL per test point."""
    X_train = np.asarray(X_train, dtype=float)
    X_test = np.asarray(X_test, dtype=float)
    K = dense_kernel(spec, X_train)
    L = np.linalg.cholesky(K)
    latent = np.empty(X_test.shape[0])
    for s in range(0, X_test.shape[0], 1024):
        e = min(s + 1024, X_test.shape[0])
        Kxs = cross_block(spec, X_train, X_test[s:e])
        V = solve_triangular(L, Kxs, lower=True)
        latent[s:e] = spec.outputscale - np.einsum("ij,ij->j", V, V)
    if np.any(latent < -1e-6 * max(1.0, spec.outputscale)):
        raise np.linalg.LinAlgError(f"negative predictive variance {latent.min():.3e}")
    var = np.maximum(np.maximum(latent, 0.0) + spec.noise_variance, 1e-12)
    resid = np.asarray(y_test, dtype=float) - np.asarray(means, dtype=float)
    nll = float(np.mean(0.5 * (np.log(2 * np.pi * var) + resid ** 2 / var)))
    return var, nll
