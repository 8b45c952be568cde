"""Variational REML for Gaussian ICAR spatial models."""

__version__ = "0.1.0"

from .graph import AdjacencyGraph, IcarStructure, build_icar, grid_graph, lattice_graph  # noqa: E402
from .model import ModelData, load_model  # noqa: E402
from .oracle import exact_posterior, maximize, restricted_loglik  # noqa: E402
from .variational import FitConfig, FitReport, VariationalState, elbo, elbo_gradients, fit  # noqa: E402

__all__ = [
    "AdjacencyGraph", "IcarStructure", "build_icar", "grid_graph", "lattice_graph",
    "ModelData", "load_model", "exact_posterior", "maximize", "restricted_loglik",
    "FitConfig", "FitReport", "VariationalState", "elbo", "elbo_gradients", "fit",
]
