"""Optimal stopping with removal costs: N-particle hierarchies, mean-field control and their checks."""

__version__ = "0.1.0"

from .envelopes import continuous_envelope, discrete_envelope  # noqa: E402
from .hierarchy import ValueHierarchy, extract_policy, query_value, solve_hierarchy  # noqa: E402
from .meanfield import MFMesh, regularization_ladder, solve_mfc  # noqa: E402
from .models import ModelSpec, make_model, validate  # noqa: E402
from .montecarlo import SimConfig, simulate  # noqa: E402
from .phi import phi_solve, phi_value  # noqa: E402
from .torus import EmpiricalState, GridMeasure, TorusGrid, bl_distance, rho_distance  # noqa: E402

__all__ = [
    "EmpiricalState",
    "GridMeasure",
    "MFMesh",
    "ModelSpec",
    "SimConfig",
    "TorusGrid",
    "ValueHierarchy",
    "bl_distance",
    "continuous_envelope",
    "discrete_envelope",
    "extract_policy",
    "make_model",
    "phi_solve",
    "phi_value",
    "query_value",
    "regularization_ladder",
    "rho_distance",
    "simulate",
    "solve_hierarchy",
    "solve_mfc",
    "validate",
]
