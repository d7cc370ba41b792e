"""Simulation and verification toolkit for the stochastic differential game
behind the inhomogeneous infinity-Laplace equation -2 Δ∞u = h."""

__version__ = "0.1.0"

from .geometry import Domain
from .problem import ProblemSpec, SpecError, builtin_spec, field_bundle, manufacture
from .simulate import SimConfig

__all__ = ["Domain", "ProblemSpec", "SimConfig", "SpecError", "builtin_spec", "field_bundle", "manufacture",
           "__version__"]
