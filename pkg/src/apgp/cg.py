"""Batched (preconditioned) conjugate gradients and the pivoted-Cholesky preconditioner."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve

from .altproj import StoppingCriteria
from .kernels import KernelSpec, cross_block, kernel_matvec
from .trace import SolveTrace, SolverError, avg_relative_residual, column_norms

__all__ = [
    "PivotedCholeskyFactor",
    "pivoted_cholesky",
    "pivoted_cholesky_dense",
    "precond_solve",
    "make_preconditioner",
    "CgBreakdownError",
    "cg_solve",
]


class CgBreakdownError(SolverError):
    pass


@dataclass
class PivotedCholeskyFactor:
    """Rank-k partial factor with ``L @ L.T ~= K`` (or its noise-free part).

    ``rank`` may be smaller than the requested ``k`` when the residual diagonal is
    exhausted before ``k`` pivots.
    """

    L: np.ndarray
    pivots: np.ndarray
    requested_rank: int
    includes_noise: bool = True
    _inner: dict = field(default_factory=dict, repr=False)

    @property
    def rank(self) -> int:
        return self.L.shape[1]

    @property
    def n(self) -> int:
        return self.L.shape[0]

    def inner_factor(self, sigma2: float) -> np.ndarray:
        """Cholesky factor of ``sigma2 I + L' L`` (cached per ``sigma2``)."""
        key = float(sigma2)
        if key not in self._inner:
            k = self.rank
            C = self.L.T @ self.L
            C[np.diag_indices(k)] += key
            try:
                self._inner[key] = np.linalg.cholesky(C)
            except np.linalg.LinAlgError as err:
                raise np.linalg.LinAlgError(
                    "preconditioner inner system is not positive definite") from err
        return self._inner[key]


def _greedy_cholesky(diag: np.ndarray, column, k: int, rtol: float, includes_noise: bool):
    n = diag.size
    diag = diag.copy()
    trace0 = float(diag.sum())
    neg_tol = -1e-8 * max(trace0 / n, 1.0)
    L = np.zeros((n, k), dtype=diag.dtype)
    pivots = []
    for i in range(k):
        p = int(np.argmax(diag))
        dmax = diag[p]
        if dmax <= rtol * trace0:
            break
        col = np.array(column(p), dtype=diag.dtype)
        col -= L[:, :i] @ L[p, :i]
        col /= np.sqrt(dmax)
        L[:, i] = col
        diag -= col * col
        diag[p] = 0.0
        pivots.append(p)
    if np.min(diag) < neg_tol:
        raise np.linalg.LinAlgError(
            "negative residual diagonal in pivoted Cholesky; increase the noise floor")
    r = len(pivots)
    return PivotedCholeskyFactor(np.ascontiguousarray(L[:, :r]), np.array(pivots, dtype=np.intp),
                                 k, includes_noise)


def pivoted_cholesky(spec: KernelSpec, X: np.ndarray, k: int, *, include_noise: bool = True,
                     rtol: float = 1e-12) -> PivotedCholeskyFactor:
    """Greedy partial Cholesky of K touching only ``k`` kernel columns.

    At each step the pivot is the index with the largest remaining diagonal (lowest
    index on ties). Stops early once that diagonal drops below ``rtol * trace(K)``.
    With ``include_noise=False`` the noise-free part ``K - noise * I`` is factored, which
    is what the CG preconditioner ``L L' + noise * I`` wants.
    """
    X = np.asarray(X)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"rank must be in [1, {n}], got {k}")
    noise = spec.noise_variance if include_noise else 0.0

    def column(p):
        col = cross_block(spec, X, X[p:p + 1])[:, 0]
        col[p] += noise
        return col

    diag = np.full(n, spec.outputscale + noise, dtype=X.dtype)
    return _greedy_cholesky(diag, column, k, rtol, include_noise)


def pivoted_cholesky_dense(A: np.ndarray, k: int, rtol: float = 1e-12) -> PivotedCholeskyFactor:
    """Same greedy factorisation for an explicit symmetric PSD matrix."""
    A = np.asarray(A, dtype=float)
    if not 1 <= k <= A.shape[0]:
        raise ValueError(f"rank must be in [1, {A.shape[0]}], got {k}")
    return _greedy_cholesky(np.diag(A).copy(), lambda p: A[:, p], k, rtol, True)


def precond_solve(factor: PivotedCholeskyFactor | None, sigma2: float, V: np.ndarray) -> np.ndarray:
    """``(L L' + sigma2 I)^{-1} V`` through the Woodbury identity."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    V = np.asarray(V)
    if factor is None or factor.rank == 0:
        return V / sigma2
    C = factor.inner_factor(sigma2)
    T = cho_solve((C, True), factor.L.T @ V, check_finite=False)
    return (V - factor.L @ T) / sigma2


def make_preconditioner(spec: KernelSpec, X: np.ndarray, k: int) -> PivotedCholeskyFactor | None:
    """Rank-k pivoted Cholesky of the noise-free kernel (``k = 0`` means none)."""
    if k <= 0:
        return None
    return pivoted_cholesky(spec, X, min(k, X.shape[0]), include_noise=False)


def cg_solve(spec: KernelSpec, X: np.ndarray, B: np.ndarray, stop: StoppingCriteria | None = None,
             preconditioner: PivotedCholeskyFactor | None = None, *, block_rows: int = 1024,
             on_iter=None):
    """Batched PCG for ``K W = B`` sharing one matvec across columns.

    Each column has its own step sizes; iteration stops on the column-averaged relative
    residual, with the same epoch guards as the alternating projection solver (an
    iteration plays the role of an epoch). Each iteration is booked as ``2 n^2 l`` FLOPs.

    Returns ``(W, trace)``.
    """
    stop = stop or StoppingCriteria.training()
    X = np.asarray(X)
    B = np.asarray(B)
    vector = B.ndim == 1
    if vector:
        B = B[:, None]
    n, ncols = B.shape
    if X.shape[0] != n:
        raise ValueError(f"B has {n} rows but X has {X.shape[0]}")
    B = B.astype(np.result_type(X.dtype, B.dtype), copy=False)
    sigma2 = spec.noise_variance

    def psolve(V):
        if preconditioner is None:
            return V
        return precond_solve(preconditioner, sigma2, V)

    t0 = time.perf_counter()
    trace = SolveTrace("cg" if preconditioner is None else "pcg")
    bnorms = column_norms(B)
    W = np.zeros_like(B)
    R = B.copy()
    flops = 0.0
    if preconditioner is not None:
        flops += preconditioner.n * preconditioner.rank ** 2
    it = 0

    def record():
        trace.append(it, it, avg_relative_residual(R, bnorms), float(np.linalg.norm(R)),
                     flops, time.perf_counter() - t0)

    record()
    Z = psolve(R)
    D = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)
    matvec_flops = 2.0 * n * n * ncols
    while not stop.done(it, trace.final_avg_rel):
        KD = kernel_matvec(spec, X, D, block_rows)
        dKd = np.einsum("ij,ij->j", D, KD)
        if np.any(dKd < 0) or not np.all(np.isfinite(dKd)):
            trace.stop_reason = "breakdown"
            raise CgBreakdownError(f"non-positive curvature at iteration {it + 1}", trace)
        active = dKd > 0
        alpha = np.where(active, rz / np.where(active, dKd, 1.0), 0.0)
        W += alpha * D
        R -= alpha * KD
        Z = psolve(R)
        rz_new = np.einsum("ij,ij->j", R, Z)
        beta = np.where(rz > 0, rz_new / np.where(rz > 0, rz, 1.0), 0.0)
        D = Z + beta * D
        rz = rz_new
        it += 1
        flops += matvec_flops
        record()
        if not np.isfinite(trace.final_avg_rel):
            trace.stop_reason = "diverged"
            raise CgBreakdownError(f"non-finite residual at iteration {it}", trace)
        if on_iter is not None:
            on_iter(it, W, R)

    trace.converged = trace.final_avg_rel < stop.tolerance
    trace.stop_reason = "tolerance" if trace.converged else "max_epochs"
    return (W[:, 0] if vector else W), trace

