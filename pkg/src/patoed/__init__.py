"""Bayesian reconstruction and illumination design for damped photoacoustic tomography."""

from .grid_fem import Mesh, FemMatrices, build_mesh, assemble, m_dot, m_norm
from .fracwave import (
    FracParams,
    TimeGrid,
    IntensityDesign,
    ObservationSeries,
    SolverContext,
    SolverError,
    caputo_weights,
    solve_forward,
    solve_adjoint,
    apply_W,
    apply_Wstar,
)

__all__ = [
    "Mesh",
    "FemMatrices",
    "build_mesh",
    "assemble",
    "m_dot",
    "m_norm",
    "FracParams",
    "TimeGrid",
    "IntensityDesign",
    "ObservationSeries",
    "SolverContext",
    "SolverError",
    "caputo_weights",
    "solve_forward",
    "solve_adjoint",
    "apply_W",
    "apply_Wstar",
]

__version__ = "0.1.0"
