"""Low-rank neural operators on point clouds with physics-informed training."""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConditionMismatch, ConfigurationError, DomainError,
                     EmptyStreamError, NumericalFailure, PilnoError)
from .geometry import Domain, PointCloud, Role, boundary_points, sobol_points
from .lno import LNOConfig, LNOModel
from .spline_space import SplineFunction, SplineSpace
from .training import TrainConfig, Trainer, load_checkpoint, train

__all__ = [
    "CheckpointError", "ConditionMismatch", "ConfigurationError", "DomainError",
    "EmptyStreamError", "NumericalFailure", "PilnoError", "Domain", "PointCloud", "Role",
    "boundary_points", "sobol_points", "LNOConfig", "LNOModel", "SplineFunction",
    "SplineSpace", "TrainConfig", "Trainer", "load_checkpoint", "train",
]
