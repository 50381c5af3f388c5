"""Sequential block partitions and the per-block Cholesky cache."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, LinAlgError

from .kernels import KernelSpec, kernel_block

__all__ = [
    "BlockPartition",
    "CholeskyCache",
    "StaleCacheError",
    "NotPositiveDefiniteError",
    "make_partition",
    "build_cache",
    "block_solve",
]


class StaleCacheError(RuntimeError):
    """The cache was built for different hyperparameters."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous blocks ``[starts[j], stops[j])`` covering ``range(n)``."""

    n: int
    batch_size: int

    def __post_init__(self):
        if self.n <= 0 or self.batch_size <= 0:
            raise ValueError(f"need n > 0 and b > 0, got n={self.n}, b={self.batch_size}")
        if self.batch_size > self.n:
            raise ValueError(f"batch size {self.batch_size} exceeds n={self.n}")

    @property
    def m(self) -> int:
        return -(-self.n // self.batch_size)

    @property
    def starts(self) -> np.ndarray:
        return np.arange(0, self.n, self.batch_size)

    @property
    def stops(self) -> np.ndarray:
        return np.minimum(self.starts + self.batch_size, self.n)

    def block(self, j: int) -> slice:
        if not 0 <= j < self.m:
            raise IndexError(f"block {j} out of range (m={self.m})")
        s = j * self.batch_size
        return slice(s, min(s + self.batch_size, self.n))

    def block_size(self, j: int) -> int:
        sl = self.block(j)
        return sl.stop - sl.start

    @property
    def blocks(self) -> list[np.ndarray]:
        return [np.arange(self.n)[self.block(j)] for j in range(self.m)]

    def __len__(self):
        return self.m


def make_partition(n: int, b: int) -> BlockPartition:
    """``ceil(n / b)`` contiguous blocks in index order; the last one may be short."""
    return BlockPartition(int(n), int(b))


@dataclass(frozen=True)
class CholeskyCache:
    """Lower Cholesky factors of every diagonal block ``K[I, I]``."""

    partition: BlockPartition
    factors: tuple
    spec_fingerprint: str
    build_flops: float

    def check(self, spec: KernelSpec):
        if spec.kernel_fingerprint != self.spec_fingerprint:
            raise StaleCacheError("Cholesky cache was built for different kernel hyperparameters")

    def factor(self, j: int) -> np.ndarray:
        return self.factors[j]

    @property
    def stored_entries(self) -> int:
        return sum(L.size for L in self.factors)


def build_cache(spec: KernelSpec, X: np.ndarray, partition: BlockPartition) -> CholeskyCache:
    """Factor ``K[I, I]`` for each block ``I``.

    FLOPs are booked as ``n b^2 / 3`` (one ``b^3 / 3`` factorisation per block).
    """
    if X.shape[0] != partition.n:
        raise ValueError("partition does not match the number of data points")
    factors = []
    for j in range(partition.m):
        sl = partition.block(j)
        Kii = kernel_block(spec, X, sl, sl)
        try:
            L = np.linalg.cholesky(Kii)
        except np.linalg.LinAlgError as err:
            raise NotPositiveDefiniteError(
                f"kernel block {j} is not numerically positive definite; "
                f"try a larger noise floor (noise_variance={spec.noise_variance:g})"
            ) from err
        L.setflags(write=False)
        factors.append(L)
    b = partition.batch_size
    return CholeskyCache(partition, tuple(factors), spec.kernel_fingerprint, partition.n * b * b / 3.0)


def block_solve(cache: CholeskyCache, block_index: int, rhs: np.ndarray,
                spec: KernelSpec | None = None) -> np.ndarray:
    """``K[I, I]^{-1} @ rhs`` by two triangular solves with the cached factor.

    Passing ``spec`` verifies the cache is not stale.
    """
    if spec is not None:
        cache.check(spec)
    L = cache.factors[block_index]
    try:
        return cho_solve((L, True), rhs, check_finite=False)
    except LinAlgError as err:  # pragma: no cover
        raise NotPositiveDefiniteError(str(err)) from err


def block_solve_flops(b: int, ncols: int) -> float:
    return (b * b + b) * ncols

