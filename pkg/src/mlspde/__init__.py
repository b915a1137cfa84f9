"""Multilevel Gaussian random field sampling on non-matching meshes for Darcy uncertainty quantification."""

from importlib import metadata as _metadata

from .hierarchy import LevelHierarchy
from .mesh import Mesh, build_simplicial_mesh, uniform_refine
from .mlmc import DarcyMlmcProblem, optimal_allocation, run_adaptive_mlmc
from .sampler import MaternParams, Sampler
from .stats import empirical_covariance, matern_cov
from .transfer import build_transfer

try:
    __version__ = _metadata.version("artifact")
except _metadata.PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"

__all__ = [
    "LevelHierarchy",
    "Mesh",
    "build_simplicial_mesh",
    "uniform_refine",
    "DarcyMlmcProblem",
    "optimal_allocation",
    "run_adaptive_mlmc",
    "MaternParams",
    "Sampler",
    "empirical_covariance",
    "matern_cov",
    "build_transfer",
]
