"""Particle-system toolkit for the 2D parabolic-parabolic chemotaxis model.

Submodules: kernels (closed-form fields and envelopes), constants
(structural constants and the sensitivity threshold), funineq (the
weighted-integral inequality suite), simulator (Euler-Maruyama with the
history-convolution drift), estimators (Monte Carlo moment functionals and
consistency diagnostics), io (trajectory/config file formats), cli.
"""

__version__ = "0.1.0"

from .kernels import KernelParams, SourceSpec
from .simulator import InitSpec, SimConfig, TrajectoryEnsemble, run
from .estimators import EstimatorParams
from .constants import StructuralParams, ThresholdResult, chi_star

__all__ = [
    "KernelParams", "SourceSpec", "InitSpec", "SimConfig",
    "TrajectoryEnsemble", "run", "EstimatorParams", "StructuralParams",
    "ThresholdResult", "chi_star", "__version__",
]
