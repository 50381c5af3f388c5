"""Alternating projection solvers for dense kernel systems and exact GP regression."""

__version__ = "0.1.0"

from .kernels import (InvalidInputError, KernelFamily, KernelSpec, cross_block, cross_matvec,
                      dense_kernel, kernel_block, kernel_matvec, kernel_value)
from .partition import (BlockPartition, CholeskyCache, NotPositiveDefiniteError, StaleCacheError,
                        block_solve, build_cache, make_partition)
from .trace import SolveTrace, SolverError
from .altproj import (SelectionRule, SolverDivergenceError, StoppingCriteria, ap_inner_step,
                      ap_solve, bcd_step_oracle, flops_formula, select_block)
from .cg import (CgBreakdownError, PivotedCholeskyFactor, cg_solve, make_preconditioner,
                 pivoted_cholesky, precond_solve)
from .gp import (TrainConfig, exact_mll, exact_mll_gradient, exact_predict_variance_nll,
                 make_probes, mll_gradient_estimate, predict_mean, train)
from .data import Dataset, DatasetError, load_dataset, synth_dataset

__all__ = [
    "__version__",
    "KernelFamily", "KernelSpec", "InvalidInputError", "kernel_value", "kernel_block",
    "cross_block", "dense_kernel", "kernel_matvec", "cross_matvec",
    "BlockPartition", "CholeskyCache", "StaleCacheError", "NotPositiveDefiniteError",
    "make_partition", "build_cache", "block_solve",
    "SolveTrace", "SolverError",
    "SelectionRule", "StoppingCriteria", "SolverDivergenceError", "select_block",
    "ap_inner_step", "ap_solve", "bcd_step_oracle", "flops_formula",
    "CgBreakdownError", "PivotedCholeskyFactor", "pivoted_cholesky", "precond_solve",
    "make_preconditioner", "cg_solve",
    "TrainConfig", "train", "make_probes", "mll_gradient_estimate", "exact_mll",
    "exact_mll_gradient", "predict_mean", "exact_predict_variance_nll",
    "Dataset", "DatasetError", "load_dataset", "synth_dataset",
]
