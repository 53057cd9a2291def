"""Numerical toolkit for a fractional Yamabe-type fast-diffusion flow on flat tori."""

from .spectral_core import Field, FlowParams, Grid, GridError, SpectralField
from .resolvent import ResolventError, ResolventProblem, ResolventSolution, solve_resolvent
from .extension import ExtensionError, ExtensionField, ExtensionMesh, extension_operator
from .flow import FlowState, FlowTrace, run_rescaled, run_unrescaled

__all__ = [
    "ExtensionError", "ExtensionField", "ExtensionMesh", "Field", "FlowParams", "FlowState",
    "FlowTrace", "Grid", "GridError", "ResolventError", "ResolventProblem", "ResolventSolution",
    "SpectralField", "extension_operator", "run_rescaled", "run_unrescaled", "solve_resolvent",
]
__version__ = "0.1.0"
