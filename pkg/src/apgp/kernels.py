"""Stationary kernels with ARD lengthscales and blocked (lazy) evaluation.

Observation noise is folded into the kernel: ``K = outputscale * k_base + noise * I``,
where the identity acts on pairs of *indices* (not on coincident coordinates).
Nothing here ever materialises more than the block that was asked for.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "KernelFamily",
    "KernelSpec",
    "InvalidInputError",
    "kernel_value",
    "kernel_block",
    "cross_block",
    "dense_kernel",
    "kernel_matvec",
    "cross_matvec",
]

SQRT3 = np.sqrt(3.0)
SQRT5 = np.sqrt(5.0)


class InvalidInputError(ValueError):
    """Raised for non-finite or malformed kernel inputs."""


class KernelFamily(str, enum.Enum):
    MATERN52 = "matern52"
    MATERN32 = "matern32"
    RBF = "rbf"


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """Kernel family plus hyperparameters.

    Parameters
    ----------
    family : KernelFamily or str
        One of ``"matern52"``, ``"matern32"``, ``"rbf"``.
    lengthscales : array_like, shape (d,)
        ARD lengthscales, all positive.
    outputscale : float
        Signal variance. Zero is allowed (degenerate constant kernel).
    noise_variance : float
        Observation noise added on the diagonal; must be ``>= noise_floor``.
    mean_constant : float
        Constant prior mean.
    noise_floor : float
        Lower bound enforced on ``noise_variance``.
    """

    family: KernelFamily
    lengthscales: np.ndarray
    outputscale: float = 1.0
    noise_variance: float = 0.1
    mean_constant: float = 0.0
    noise_floor: float = field(default=1e-4)

    def __post_init__(self):
        fam = KernelFamily(self.family)
        ls = np.array(self.lengthscales, dtype=np.float64).reshape(-1)
        ls.setflags(write=False)
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "lengthscales", ls)
        for name in ("outputscale", "noise_variance", "mean_constant", "noise_floor"):
            object.__setattr__(self, name, float(getattr(self, name)))

        if ls.size == 0:
            raise InvalidInputError("need at least one lengthscale")
        if not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise InvalidInputError(f"lengthscales must be finite and positive, got {ls}")
        if not np.isfinite(self.outputscale) or self.outputscale < 0:
            raise InvalidInputError(f"outputscale must be >= 0, got {self.outputscale}")
        if self.noise_floor < 0:
            raise InvalidInputError("noise_floor must be >= 0")
        if not np.isfinite(self.noise_variance) or self.noise_variance < self.noise_floor:
            raise InvalidInputError(
                f"noise_variance {self.noise_variance} below noise_floor {self.noise_floor}"
            )
        if not np.isfinite(self.mean_constant):
            raise InvalidInputError("mean_constant must be finite")

    @property
    def d(self) -> int:
        return self.lengthscales.size

    @cached_property
    def kernel_fingerprint(self) -> str:
        """Digest of everything that determines the kernel matrix (the mean is excluded)."""
        h = hashlib.sha256()
        h.update(self.family.value.encode())
        h.update(self.lengthscales.tobytes())
        h.update(np.array([self.outputscale, self.noise_variance]).tobytes())
        return h.hexdigest()

    def replace(self, **changes) -> "KernelSpec":
        kw = dict(
            family=self.family,
            lengthscales=self.lengthscales,
            outputscale=self.outputscale,
            noise_variance=self.noise_variance,
            mean_constant=self.mean_constant,
            noise_floor=self.noise_floor,
        )
        kw.update(changes)
        return KernelSpec(**kw)

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "lengthscales": [float(v) for v in self.lengthscales],
            "outputscale": self.outputscale,
            "noise_variance": self.noise_variance,
            "mean_constant": self.mean_constant,
            "noise_floor": self.noise_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(**d)


def base_from_sqdist(family: KernelFamily, r2: np.ndarray) -> np.ndarray:
    """Unit-outputscale kernel as a function of the squared ARD distance (new array)."""
    if family is KernelFamily.RBF:
        out = np.multiply(r2, -0.5)
        return np.exp(out, out=out)
    sr = np.sqrt(np.maximum(r2, 0))
    if family is KernelFamily.MATERN52:
        sr *= SQRT5
        out = np.multiply(r2, 5.0 / 3.0)
        out += sr
    elif family is KernelFamily.MATERN32:
        sr *= SQRT3
        out = sr.copy()
    else:
        raise ValueError(f"unknown kernel family {family!r}")
    out += 1.0
    np.negative(sr, out=sr)
    np.exp(sr, out=sr)
    out *= sr
    return out


def scaled_sqdist(lengthscales, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """ARD-scaled squared distances between rows of A and rows of B.

    Accumulates one coordinate at a time from explicit differences, so each entry is
    computed by the same elementwise path whatever block it lands in (and swapping the
    arguments gives the bitwise transpose).
    """
    ls = np.asarray(lengthscales, dtype=A.dtype)
    As = A / ls
    Bs = B / ls
    out = np.zeros((A.shape[0], B.shape[0]), dtype=A.dtype)
    tmp = np.empty_like(out)
    for j in range(As.shape[1]):
        np.subtract(As[:, j, None], Bs[None, :, j], out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        out += tmp
    return out


def _check_finite(A: np.ndarray, what: str):
    if not np.all(np.isfinite(A)):
        raise InvalidInputError(f"{what} contains non-finite values")


def kernel_value(spec: KernelSpec, x, xp, same_point: bool = False) -> float:
    """Evaluate k(x, x') for single points; adds the noise iff ``same_point``."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    xp = np.asarray(xp, dtype=np.float64).reshape(1, -1)
    _check_finite(x, "x")
    _check_finite(xp, "x'")
    if x.shape[1] != spec.d or xp.shape[1] != spec.d:
        raise InvalidInputError(f"points must have dimension {spec.d}")
    r2 = scaled_sqdist(spec.lengthscales, x, xp)
    val = spec.outputscale * float(base_from_sqdist(spec.family, r2)[0, 0])
    if same_point:
        val += spec.noise_variance
    return val


def _as_index(sel, n: int) -> np.ndarray | slice:
    if sel is None:
        return slice(0, n)
    if isinstance(sel, slice):
        start, stop, step = sel.indices(n)
        if sel.stop is not None and sel.stop > n:
            raise IndexError(f"slice {sel} out of range for n={n}")
        return slice(start, stop, step)
    idx = np.asarray(sel)
    if idx.dtype == bool:
        raise TypeError("boolean masks are not accepted as index sets")
    idx = idx.astype(np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"index out of range for n={n}")
    return idx


def _index_array(sel, n: int) -> np.ndarray:
    if isinstance(sel, slice):
        return np.arange(n)[sel]
    return sel


def cross_block(spec: KernelSpec, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Noise-free cross-covariance ``outputscale * k_base(A, B)``."""
    r2 = scaled_sqdist(spec.lengthscales, A, B)
    out = base_from_sqdist(spec.family, r2)
    out *= spec.outputscale
    return out


def kernel_block(spec: KernelSpec, X: np.ndarray, rows=None, cols=None) -> np.ndarray:
    """Evaluate ``K[rows, cols]`` (noise on pairs with equal indices).

    ``rows`` and ``cols`` may be slices, integer index arrays, or ``None`` (all).
    """
    X = np.asarray(X)
    n = X.shape[0]
    ri = _as_index(rows, n)
    ci = _as_index(cols, n)
    A = X[ri]
    B = X[ci]
    _check_finite(A, "X[rows]")
    _check_finite(B, "X[cols]")
    K = cross_block(spec, A, B)
    if spec.noise_variance == 0:
        return K
    if isinstance(ri, slice) and isinstance(ci, slice) and ri.step == 1 and ci.step == 1:
        lo, hi = max(ri.start, ci.start), min(ri.stop, ci.stop)
        if lo < hi:
            a = np.arange(lo - ri.start, hi - ri.start)
            b = np.arange(lo - ci.start, hi - ci.start)
            K[a, b] += spec.noise_variance
        return K
    ra = _index_array(ri, n)
    ca = _index_array(ci, n)
    mask = ra[:, None] == ca[None, :]
    K[mask] += spec.noise_variance
    return K


def dense_kernel(spec: KernelSpec, X: np.ndarray) -> np.ndarray:
    """The full n x n matrix. Only for oracles and small problems."""
    return kernel_block(spec, X, None, None)


def kernel_matvec(spec: KernelSpec, X: np.ndarray, V: np.ndarray, block_rows: int = 1024) -> np.ndarray:
    """``K @ V`` evaluated in row panels of ``block_rows`` rows."""
    X = np.asarray(X)
    V = np.asarray(V)
    n = X.shape[0]
    if V.shape[0] != n:
        raise ValueError(f"V has {V.shape[0]} rows, expected {n}")
    if block_rows <= 0:
        raise ValueError("block_rows must be positive")
    out = np.empty(V.shape, dtype=np.result_type(X.dtype, V.dtype))
    for s in range(0, n, block_rows):
        e = min(s + block_rows, n)
        out[s:e] = kernel_block(spec, X, slice(s, e), None) @ V
    return out


def cross_matvec(spec: KernelSpec, Xa: np.ndarray, Xb: np.ndarray, V: np.ndarray,
                 block_rows: int = 1024) -> np.ndarray:
    """``k(Xa, Xb) @ V`` without noise, in row panels over ``Xa``."""
    Xa = np.asarray(Xa)
    Xb = np.asarray(Xb)
    _check_finite(Xa, "Xa")
    _check_finite(Xb, "Xb")
    V = np.asarray(V)
    out = np.empty((Xa.shape[0],) + V.shape[1:], dtype=np.result_type(Xa.dtype, V.dtype))
    for s in range(0, Xa.shape[0], block_rows):
        e = min(s + block_rows, Xa.shape[0])
        out[s:e] = cross_block(spec, Xa[s:e], Xb) @ V
    return out
