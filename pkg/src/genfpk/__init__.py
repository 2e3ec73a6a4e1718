"""Response-pdf evolution of nonlinear dynamical systems driven by additive
Gaussian colored noise.

Subpackages cover the excitation laws and their sampling, the dynamical
system registry, state-transition-matrix propagators, diffusion-coefficient
assembly for the pdf-evolution models (white-noise, small-correlation-time,
history-dependent, exact linear), the Crank-Nicolson grid solver with moment
closure, Monte Carlo validation, and closed-form oracles.
"""

from . import analytic, coefficients, config, dynamics, excitation, montecarlo
from . import propagator, solver

__version__ = "0.1.0"

__all__ = [
    "analytic",
    "coefficients",
    "config",
    "dynamics",
    "excitation",
    "montecarlo",
    "propagator",
    "solver",
]
