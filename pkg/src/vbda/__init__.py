"""Variational bottleneck domain adaptation on a small numpy autodiff core."""

from ._kernels import BACKEND
from .autodiff import Graph, RngStream, Tensor, backward, finite_difference_check
from .data import DomainBatch, DomainPair, Dataset, SyntheticSpec, generate
from .models import Architecture, GaussianLatent, ModelParams, init_params
from .objectives import LossBreakdown, total_objective
from .training import MetricsRecord, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Architecture",
    "Dataset",
    "DomainBatch",
    "DomainPair",
    "GaussianLatent",
    "Graph",
    "LossBreakdown",
    "MetricsRecord",
    "ModelParams",
    "RngStream",
    "SyntheticSpec",
    "Tensor",
    "TrainConfig",
    "backward",
    "evaluate",
    "finite_difference_check",
    "generate",
    "init_params",
    "total_objective",
    "train",
]
