"""Alternating projection for ``K W = B`` with many right-hand sides.

Each inner step picks a block ``I``, solves the small system with the cached Cholesky
factor of ``K[I, I]`` and pushes the correction through ``K[:, I]``:

    U = K[I, I]^{-1} R[I]
    W[I] += U
    R    -= K[:, I] @ U

This is exact block coordinate descent on ``h(W) = tr(W'KW)/2 - tr(B'W)``; only the
residual is kept up to date, which makes greedy (Gauss-Southwell) selection cheap.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .kernels import KernelSpec, dense_kernel, kernel_block
from .partition import BlockPartition, CholeskyCache, block_solve, build_cache, make_partition
from .trace import SolveTrace, SolverError, avg_relative_residual, column_norms

__all__ = [
    "StoppingCriteria",
    "SelectionRule",
    "SolveState",
    "SolverDivergenceError",
    "select_block",
    "init_state",
    "ap_inner_step",
    "ap_solve",
    "bcd_step_oracle",
    "quadratic_objective",
    "flops_formula",
    "inner_step_flops",
]


class SolverDivergenceError(SolverError):
    pass


@dataclass(frozen=True)
class StoppingCriteria:
    """Stop once the average relative residual is *strictly* below ``tolerance``
    and at least ``min_epochs`` epochs ran, or after ``max_epochs``."""

    tolerance: float = 1.0
    max_epochs: int = 1000
    min_epochs: int = 11

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.min_epochs < 0 or self.max_epochs < 1 or self.min_epochs > self.max_epochs:
            raise ValueError(f"bad epoch bounds min={self.min_epochs} max={self.max_epochs}")

    @classmethod
    def training(cls) -> "StoppingCriteria":
        return cls(1.0, 1000, 11)

    @classmethod
    def test_time(cls) -> "StoppingCriteria":
        return cls(0.01, 1000, 11)

    def done(self, epoch: int, avg_rel: float) -> bool:
        if epoch >= self.max_epochs:
            return True
        return avg_rel < self.tolerance and epoch >= self.min_epochs


_RULE_ALIASES = {
    "gs": "gs", "gauss-southwell": "gs", "gauss_southwell": "gs", "gausssouthwell": "gs",
    "cyclic": "cyclic", "random": "random",
}


@dataclass(frozen=True)
class SelectionRule:
    kind: str = "gs"
    seed: int | None = None

    def __post_init__(self):
        kind = _RULE_ALIASES.get(str(self.kind).lower())
        if kind is None:
            raise ValueError(f"unknown selection rule {self.kind!r}")
        object.__setattr__(self, "kind", kind)

    @classmethod
    def parse(cls, rule, seed=None) -> "SelectionRule":
        if isinstance(rule, SelectionRule):
            return rule
        return cls(rule, seed)

    @property
    def name(self) -> str:
        return self.kind


def _block_sq_norms(R: np.ndarray, partition: BlockPartition) -> np.ndarray:
    rowsq = np.einsum("ij,ij->i", R, R)
    return np.add.reduceat(rowsq, partition.starts)


def select_block(rule: SelectionRule, R: np.ndarray, partition: BlockPartition,
                 inner_iter: int, rng: np.random.Generator | None = None) -> int:
    """Index of the next block to update (0-based).

    Gauss-Southwell takes the block with the largest ``||R[I, :]||_F^2`` (first one on
    ties); cyclic walks the blocks in order; random draws uniformly from ``rng``.
    """
    if rule.kind == "gs":
        return int(np.argmax(_block_sq_norms(R, partition)))
    if rule.kind == "cyclic":
        return inner_iter % partition.m
    if rng is None:
        raise ValueError("random selection needs a generator")
    return int(rng.integers(partition.m))


def inner_step_flops(n: int, b: int, ncols: int) -> float:
    """Weight update ``(b^2 + b) l`` plus residual update ``(b^2 + 2nb + n) l``."""
    return float((b * b + b) * ncols + (b * b + 2 * n * b + n) * ncols)


def flops_formula(n: int, b: int, l: int) -> float:
    """FLOPs of one epoch with Gauss-Southwell selection, ``((2 + 3/b) n^2 + (2b + 1) n) l``."""
    if n <= 0 or b <= 0 or l <= 0:
        raise ValueError("n, b, l must be positive")
    return ((2 + 3 / b) * n * n + (2 * b + 1) * n) * l


@dataclass
class SolveState:
    W: np.ndarray
    R: np.ndarray
    B: np.ndarray
    bnorms: np.ndarray
    epoch: int = 0
    inner_iter: int = 0
    flops: float = 0.0
    trace: SolveTrace = field(default_factory=lambda: SolveTrace("ap"))
    rng: np.random.Generator | None = None

    @property
    def avg_rel(self) -> float:
        return avg_relative_residual(self.R, self.bnorms)


def init_state(B: np.ndarray, rule: SelectionRule | None = None, method: str = "ap") -> SolveState:
    """``W = 0`` and ``R = B``."""
    B = np.asarray(B)
    rng = None
    if rule is not None and rule.kind == "random":
        rng = np.random.default_rng(rule.seed)
    return SolveState(W=np.zeros_like(B), R=B.copy(), B=B, bnorms=column_norms(B),
                      trace=SolveTrace(method), rng=rng)


def ap_inner_step(state: SolveState, cache: CholeskyCache, spec: KernelSpec, X: np.ndarray,
                  block: int) -> SolveState:
    """Project the residual onto block ``block``; updates ``state`` in place and returns it."""
    cache.check(spec)
    part = cache.partition
    sl = part.block(block)
    U = block_solve(cache, block, state.R[sl])
    state.W[sl] += U
    state.R -= kernel_block(spec, X, None, sl) @ U
    state.inner_iter += 1
    state.flops += inner_step_flops(part.n, sl.stop - sl.start, state.R.shape[1])
    return state


def _record(state: SolveState, t0: float):
    state.trace.append(state.epoch, state.inner_iter, state.avg_rel,
                       float(np.linalg.norm(state.R)), state.flops, time.perf_counter() - t0)


def ap_solve(spec: KernelSpec, X: np.ndarray, B: np.ndarray, partition: BlockPartition | int,
             rule: SelectionRule | str = "gs", stop: StoppingCriteria | None = None, *,
             cache: CholeskyCache | None = None, seed: int | None = None,
             record_steps: bool = False, on_step=None, on_epoch=None):
    """Solve ``K W = B`` by alternating projection.

    Parameters
    ----------
    spec, X
        Kernel and inputs defining ``K``.
    B : ndarray, shape (n,) or (n, k)
        Right-hand sides.
    partition : BlockPartition or int
        Block partition, or a batch size for the sequential partition.
    rule : SelectionRule or str
        ``"gs"`` (default), ``"cyclic"`` or ``"random"``.
    stop : StoppingCriteria
        Defaults to the training criteria (tolerance 1, 11..1000 epochs).
    cache : CholeskyCache, optional
        Reuse factors built for the same ``spec``; built (and its FLOPs counted) otherwise.
    seed : int, optional
        Seed for the random rule when ``rule`` is given as a string.
    record_steps : bool
        Keep ``(epoch, inner_iter, block, ||R||_F)`` for every inner step in ``trace.steps``.
    on_step, on_epoch : callable, optional
        Called with the live ``SolveState`` after each inner step / epoch.

    Returns
    -------
    W : ndarray
        Same shape as ``B``.
    trace : SolveTrace
    """
    stop = stop or StoppingCriteria.training()
    rule = SelectionRule.parse(rule, seed)
    X = np.asarray(X)
    B = np.asarray(B)
    vector = B.ndim == 1
    if vector:
        B = B[:, None]
    n, ncols = B.shape
    if X.shape[0] != n:
        raise ValueError(f"B has {n} rows but X has {X.shape[0]}")
    if not np.all(np.isfinite(B)):
        raise ValueError("B contains non-finite values")
    if isinstance(partition, (int, np.integer)):
        partition = make_partition(n, min(int(partition), n))
    B = B.astype(np.result_type(X.dtype, B.dtype), copy=False)

    t0 = time.perf_counter()
    state = init_state(B, rule, method=f"ap_{rule.name}")
    if cache is None:
        cache = build_cache(spec, X, partition)
        state.flops += cache.build_flops
    elif cache.partition != partition:
        raise ValueError("cache was built for a different partition")
    cache.check(spec)
    _record(state, t0)

    gs_cost = 2.0 * n * ncols
    while not stop.done(state.epoch, state.avg_rel):
        for _ in range(partition.m):
            j = select_block(rule, state.R, partition, state.inner_iter, state.rng)
            if rule.kind == "gs":
                state.flops += gs_cost
            ap_inner_step(state, cache, spec, X, j)
            if record_steps:
                state.trace.steps.append((state.epoch + 1, state.inner_iter, j,
                                          float(np.linalg.norm(state.R))))
            if on_step is not None:
                on_step(state)
        state.epoch += 1
        _record(state, t0)
        if not np.isfinite(state.trace.final_avg_rel):
            state.trace.stop_reason = "diverged"
            raise SolverDivergenceError(f"non-finite residual after epoch {state.epoch}",
                                        state.trace)
        if on_epoch is not None:
            on_epoch(state)

    state.trace.converged = state.avg_rel < stop.tolerance
    state.trace.stop_reason = "tolerance" if state.trace.converged else "max_epochs"
    W = state.W[:, 0] if vector else state.W
    return W, state.trace


def bcd_step_oracle(W: np.ndarray, spec: KernelSpec, X: np.ndarray, B: np.ndarray,
                    block) -> np.ndarray:
    """Exact block coordinate descent update ``W[I] = K[I,I]^{-1} (B[I] - K[I,~I] W[~I])``.

    Dense in the rows of ``I``; meant as a test oracle. Returns a new array.
    """
    n = X.shape[0]
    idx = np.arange(n)[block] if isinstance(block, slice) else np.asarray(block)
    rest = np.setdiff1d(np.arange(n), idx)
    W = np.array(W, copy=True)
    Kii = kernel_block(spec, X, idx, idx)
    rhs = B[idx] - kernel_block(spec, X, idx, rest) @ W[rest]
    W[idx] = np.linalg.solve(Kii, rhs)
    return W


def quadratic_objective(W: np.ndarray, spec: KernelSpec, X: np.ndarray, B: np.ndarray) -> float:
    """``h(W) = tr(W' K W) / 2 - tr(B' W)`` with a dense ``K`` (test oracle)."""
    K = dense_kernel(spec, X)
    return float(0.5 * np.sum(W * (K @ W)) - np.sum(B * W))
