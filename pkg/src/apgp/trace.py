"""Convergence traces shared by the iterative solvers."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

TRACE_COLUMNS = (
    "epoch",
    "inner_iters",
    "avg_rel_residual",
    "frobenius_residual",
    "cumulative_flops",
    "wall_time_s",
)


def fmt(x) -> str:
    """Full-precision text form of a number (17 significant digits for floats)."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def column_norms(M: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->j", M, M))


def avg_relative_residual(R: np.ndarray, bnorms: np.ndarray) -> float:
    """Mean over columns of ``||r_i|| / ||b_i||``; zero right-hand sides count as 0."""
    # overflow shows up as a non-finite average, which the solvers report as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        rn = column_norms(R)
        safe = np.where(bnorms > 0, bnorms, 1.0)
        rel = np.where(bnorms > 0, rn / safe, 0.0)
    return float(np.mean(rel))


@dataclass
class EpochRecord:
    epoch: int
    inner_iters: int
    avg_rel_residual: float
    frobenius_residual: float
    cumulative_flops: float
    wall_time_s: float


@dataclass
class SolveTrace:
    """Per-epoch (AP) or per-iteration (CG) record of a solve.

    ``records[0]`` always describes the initial state ``W = 0, R = B``.
    """

    method: str
    records: list[EpochRecord] = field(default_factory=list)
    steps: list[tuple] = field(default_factory=list)
    converged: bool = False
    stop_reason: str = ""

    def append(self, *args):
        self.records.append(EpochRecord(*args))

    @property
    def epochs(self) -> int:
        return self.records[-1].epoch if self.records else 0

    @property
    def final_avg_rel(self) -> float:
        return self.records[-1].avg_rel_residual

    @property
    def total_flops(self) -> float:
        return self.records[-1].cumulative_flops

    def epochs_to_tolerance(self, tol: float):
        """First epoch/iteration whose average relative residual is below ``tol``."""
        for rec in self.records:
            if rec.avg_rel_residual < tol:
                return rec.epoch
        return None

    def flops_to_tolerance(self, tol: float):
        for rec in self.records:
            if rec.avg_rel_residual < tol:
                return rec.cumulative_flops
        return None

    def per_epoch_flops(self) -> np.ndarray:
        return np.diff([r.cumulative_flops for r in self.records])

    def to_csv(self, path=None, wall_time: bool = True) -> str:
        """Write the trace CSV; ``wall_time=False`` zeroes the timing column for reproducible output."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.records:
            w.writerow([
                fmt(r.epoch), fmt(r.inner_iters), fmt(r.avg_rel_residual),
                fmt(r.frobenius_residual), fmt(r.cumulative_flops),
                fmt(r.wall_time_s if wall_time else 0.0),
            ])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def read_csv(cls, path, method: str = "") -> "SolveTrace":
        tr = cls(method)
        with open(path, encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                tr.append(int(row["epoch"]), int(row["inner_iters"]),
                          float(row["avg_rel_residual"]), float(row["frobenius_residual"]),
                          float(row["cumulative_flops"]), float(row["wall_time_s"]))
        return tr


class SolverError(RuntimeError):
    """Solver failure; the partial trace is attached as ``.trace``."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace
