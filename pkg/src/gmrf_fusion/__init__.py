"""Spatial data fusion of station and gridded forecast data with SPDE GMRF models."""

__version__ = "0.1.0"

from .geometry import Domain, Mesh, build_mesh, project  # noqa: E402
from .inference import bma_fit, bma_predict, calibrate_grid, condition, fit_map  # noqa: E402
from .models import ObservationSet, Targets, make_model  # noqa: E402
from .priors import HyperPriorSet, PCPrior  # noqa: E402

__all__ = [
    "Domain",
    "Mesh",
    "build_mesh",
    "project",
    "ObservationSet",
    "Targets",
    "make_model",
    "HyperPriorSet",
    "PCPrior",
    "condition",
    "fit_map",
    "bma_fit",
    "bma_predict",
    "calibrate_grid",
    "__version__",
]
