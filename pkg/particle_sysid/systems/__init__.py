"""
State-space models for particle system identification.

Every model implements ``StateSpaceModel`` and advertises its optional
features (densities, gradients, linearizations, sufficient statistics,
parameter conditionals) so that algorithms can check them up front.

Usage:
    from particle_sysid.systems import ModelRegistry

    registry = ModelRegistry()
    model = registry.build("watertank", structure="full")
    registry.check_algorithm(model, "psaem")
"""

from .base import FEATURES, StateSpaceModel
from .registry import ALGORITHM_REQUIREMENTS, ModelRegistry

__all__ = [
    "FEATURES",
    "StateSpaceModel",
    "ALGORITHM_REQUIREMENTS",
    "ModelRegistry",
]
