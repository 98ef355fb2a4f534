"""Mean-field SDE laboratory: particle simulation of cooperative McKean-Vlasov
equations, their invariant measures, and checks on the ordered dynamics."""

from ._accel import backend, set_backend
from .errors import (
    BlowUpError,
    ClaimFailure,
    ConfigError,
    MVLabError,
    NonConvergenceError,
    NumericalError,
    UnsupportedModelError,
)
from .measure import EmpiricalMeasure, SignedDiscreteMeasure, stochastic_order, wasserstein
from .model import ModelSpec, cross_coupled_2d, custom, double_well, multi_well, perturbed_double_well
from .particle import IntegrationSchedule, InitialLaw, ParticleEnsemble, init_ensemble, simulate

__version__ = "0.1.0"

__all__ = [
    "BlowUpError",
    "ClaimFailure",
    "ConfigError",
    "EmpiricalMeasure",
    "InitialLaw",
    "IntegrationSchedule",
    "MVLabError",
    "ModelSpec",
    "NonConvergenceError",
    "NumericalError",
    "ParticleEnsemble",
    "SignedDiscreteMeasure",
    "UnsupportedModelError",
    "backend",
    "cross_coupled_2d",
    "custom",
    "double_well",
    "init_ensemble",
    "multi_well",
    "perturbed_double_well",
    "set_backend",
    "simulate",
    "stochastic_order",
    "wasserstein",
]
