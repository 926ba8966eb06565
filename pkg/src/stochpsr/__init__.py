"""Stochastic neural Poisson surface reconstruction.

Mean and covariance of a Gaussian-process implicit surface, each represented
by a sinusoidal network and trained against sparse posterior samples, plus
statistical queries, correlation-aware ray casting, next-best-view planning
and a latent-code (autodecoder) extension.
"""

__version__ = "0.1.0"

from .core import BoundingBox, NormalizationTransform, OrientedPointCloud, RunConfig, load_cloud, save_cloud
from .errors import (
    CheckpointError,
    DegenerateInput,
    EmptyResult,
    EmptyScan,
    InvalidConfig,
    NumericalError,
    ShapeError,
    StochPSRError,
    TrainingDiverged,
)
from .queries import StochasticImplicit, grid_eval, integrated_uncertainty, load_implicit, save_implicit
from .training import fine_tune, train

__all__ = [
    "BoundingBox", "NormalizationTransform", "OrientedPointCloud", "RunConfig", "load_cloud", "save_cloud",
    "CheckpointError", "DegenerateInput", "EmptyResult", "EmptyScan", "InvalidConfig", "NumericalError",
    "ShapeError", "StochPSRError", "TrainingDiverged", "StochasticImplicit", "grid_eval",
    "integrated_uncertainty", "load_implicit", "save_implicit", "fine_tune", "train",
]
