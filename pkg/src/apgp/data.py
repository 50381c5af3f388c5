"""Datasets: CSV ingestion, GP-prior synthetic data, train/test split and standardisation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .kernels import KernelFamily, KernelSpec, dense_kernel
from .trace import fmt

__all__ = ["Dataset", "DatasetError", "split_indices", "load_dataset", "synth_dataset",
           "sample_gp_prior", "write_csv"]

DENSE_SAMPLING_LIMIT = 5000


class DatasetError(ValueError):
    pass


def split_indices(n: int, ratio: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle, then the first ``round(ratio * n)`` indices go to training."""
    if not 0 < ratio <= 1:
        raise ValueError("split ratio must be in (0, 1]")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratio * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


@dataclass(frozen=True, eq=False)
class Dataset:
    """Raw data plus a split; standardised views use training-split statistics only."""

    X: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    standardize_features: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.X.ndim != 2 or self.y.ndim != 1 or self.X.shape[0] != self.y.shape[0]:
            raise DatasetError("X must be (n, d) and y must be (n,)")
        both = np.concatenate([self.train_idx, self.test_idx])
        if both.size != self.n or np.unique(both).size != self.n:
            raise DatasetError("train/test indices must partition range(n)")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @cached_property
    def label_mean(self) -> float:
        return float(np.mean(self.y[self.train_idx])) if self.train_idx.size else 0.0

    @cached_property
    def label_std(self) -> float:
        s = float(np.std(self.y[self.train_idx])) if self.train_idx.size else 0.0
        return s if s > 0 else 1.0

    @cached_property
    def feature_mean(self) -> np.ndarray:
        if not self.standardize_features or self.train_idx.size == 0:
            return np.zeros(self.d)
        return self.X[self.train_idx].mean(axis=0)

    @cached_property
    def feature_std(self) -> np.ndarray:
        if not self.standardize_features or self.train_idx.size == 0:
            return np.ones(self.d)
        s = self.X[self.train_idx].std(axis=0)
        return np.where(s > 0, s, 1.0)

    def transform_X(self, X) -> np.ndarray:
        return (np.asarray(X) - self.feature_mean) / self.feature_std

    def transform_y(self, y) -> np.ndarray:
        return (np.asarray(y) - self.label_mean) / self.label_std

    @property
    def X_train(self) -> np.ndarray:
        return self.transform_X(self.X[self.train_idx])

    @property
    def y_train(self) -> np.ndarray:
        return self.transform_y(self.y[self.train_idx])

    @property
    def X_test(self) -> np.ndarray:
        return self.transform_X(self.X[self.test_idx])

    @property
    def y_test(self) -> np.ndarray:
        return self.transform_y(self.y[self.test_idx])


def _parse_csv(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        width = len(header)
        if width < 2:
            raise DatasetError(f"{path}: need at least one feature column and a target")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise DatasetError(f"{path}:{line}: expected {width} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise DatasetError(f"{path}:{line}: non-numeric value") from None
            if not all(np.isfinite(vals)):
                raise DatasetError(f"{path}:{line}: NaN or infinite value")
            rows.append(vals)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    A = np.array(rows, dtype=np.float64)
    return A[:, :-1], A[:, -1], header


def load_dataset(path, split_ratio: float = 0.8, seed=0, standardize_features: bool = True) -> Dataset:
    """Read a CSV (header; features then target in the last column) and split it."""
    X, y, header = _parse_csv(path)
    tr, te = split_indices(X.shape[0], split_ratio, seed)
    return Dataset(X, y, tr, te, standardize_features, {"source": str(path), "columns": header})


def write_csv(path, X: np.ndarray, y: np.ndarray, header=None):
    d = X.shape[1]
    header = header or [f"x{j}" for j in range(d)] + ["y"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for xi, yi in zip(X, y):
            w.writerow([fmt(v) for v in xi] + [fmt(yi)])


def _random_feature_sample(spec: KernelSpec, X: np.ndarray, rng, num_features: int) -> np.ndarray:
    # Bochner: RBF spectrum is Gaussian, Matérn-nu is a multivariate t with 2 nu dof.
    d = X.shape[1]
    Z = rng.standard_normal((num_features, d))
    if spec.family is not KernelFamily.RBF:
        nu = 2.5 if spec.family is KernelFamily.MATERN52 else 1.5
        g = rng.chisquare(2 * nu, size=(num_features, 1))
        Z = Z * np.sqrt(2 * nu / g)
    omega = Z / spec.lengthscales
    phase = rng.uniform(0, 2 * np.pi, num_features)
    weights = rng.standard_normal(num_features)
    f = np.empty(X.shape[0])
    for s in range(0, X.shape[0], 4096):
        e = min(s + 4096, X.shape[0])
        f[s:e] = np.cos(X[s:e] @ omega.T + phase) @ weights
    return f * np.sqrt(2 * spec.outputscale / num_features)


def sample_gp_prior(spec: KernelSpec, X: np.ndarray, rng, num_features: int = 4096) -> np.ndarray:
    """One draw of ``y ~ N(mu, K)`` (noise included).

    Exact (dense Cholesky) up to ``DENSE_SAMPLING_LIMIT`` points; beyond that the latent
    function comes from random Fourier features, an approximation.
    """
    rng = np.random.default_rng(rng)
    n = X.shape[0]
    if n <= DENSE_SAMPLING_LIMIT:
        K = dense_kernel(spec, X)
        jitter = 1e-10 * max(spec.outputscale, 1.0) if spec.noise_variance == 0 else 0.0
        if jitter:
            K[np.diag_indices(n)] += jitter
        L = np.linalg.cholesky(K)
        return spec.mean_constant + L @ rng.standard_normal(n)
    f = _random_feature_sample(spec, X, rng, num_features)
    return spec.mean_constant + f + np.sqrt(spec.noise_variance) * rng.standard_normal(n)


def synth_dataset(n: int, d: int, spec: KernelSpec, seed=0, split_ratio: float = 0.8,
                  standardize_features: bool = False) -> Dataset:
    """Inputs uniform on ``[0, 1]^d``, labels drawn from the GP prior of ``spec``.

    Features are left unscaled by default so the generating lengthscales keep their meaning.
    """
    if spec.d != d:
        raise ValueError(f"spec has {spec.d} lengthscales but d={d}")
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, d))
    y = sample_gp_prior(spec, X, rng)
    tr, te = split_indices(n, split_ratio, rng)
    meta = {"generator": "gp_prior", "spec": spec.to_dict(), "seed": seed,
            "exact": n <= DENSE_SAMPLING_LIMIT}
    return Dataset(X, y, tr, te, standardize_features, meta)
