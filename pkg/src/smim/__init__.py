"""Spherical multi-index models: harmonic tensor unfolding and leap complexity."""

__version__ = "0.1.0"

from .complexity import estimate_xi_norm, estimate_xi_spectrum, leap_plan, symbolic_leap_plan
from .estimator import (
    DegenerateKernelError,
    EstimatorStall,
    UnfoldConfig,
    multi_step,
    one_step,
    oracle_kernel,
)
from .models import Dataset, LinkSpec, read_dataset, sample_mim, write_dataset
from .tensor_core import frame_distance

__all__ = [
    "Dataset", "DegenerateKernelError", "EstimatorStall", "LinkSpec", "UnfoldConfig",
    "estimate_xi_norm", "estimate_xi_spectrum", "frame_distance", "leap_plan", "multi_step",
    "one_step", "oracle_kernel", "read_dataset", "sample_mim", "symbolic_leap_plan",
    "write_dataset",
]
