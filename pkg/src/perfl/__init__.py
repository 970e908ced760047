"""Solvers and benchmarks for personalized federated learning objectives."""

from .model import OracleLedger, Problem, SmoothnessInfo, StackedPoint, objective_value
from .losses import LogisticLoss, QuadraticLoss, make_batch
from .solvers import METHODS, SolverRun, solve
from .lowerbound import build_instance, build_nesterov_instance, certify_bound

__version__ = "0.1.0"

__all__ = [
    "OracleLedger",
    "Problem",
    "SmoothnessInfo",
    "StackedPoint",
    "objective_value",
    "LogisticLoss",
    "QuadraticLoss",
    "make_batch",
    "METHODS",
    "SolverRun",
    "solve",
    "build_instance",
    "build_nesterov_instance",
    "certify_bound",
    "__version__",
]
