"""Entropy-regularized min-max games over probability measures on grids.

Fisher-Rao flows, mirror descent-ascent and mixed Nash equilibrium
diagnostics for two-player zero-sum games played with densities.
"""
from .measure import (
    Grid,
    GridMeasure,
    GridMismatchError,
    ReferenceMeasure,
    from_density,
    gibbs_normalize,
    kl_divergence,
    mix,
    reference_from_potential,
    tv_distance,
    uniform_measure,
    density_ratio_bounds,
)
from .payoff import (
    Bilinear,
    Composite,
    Separable,
    RegularizedObjective,
    bound_constants,
    drift_a,
    drift_b,
    eval_f,
    eval_v_sigma,
    flat_dmu,
    flat_dnu,
    second_flat,
)

__version__ = "0.1.0"

__all__ = [
    "Grid", "GridMeasure", "GridMismatchError", "ReferenceMeasure", "from_density", "gibbs_normalize",
    "kl_divergence", "mix", "reference_from_potential", "tv_distance", "uniform_measure",
    "density_ratio_bounds", "Bilinear", "Composite", "Separable", "RegularizedObjective", "bound_constants",
    "drift_a", "drift_b", "eval_f", "eval_v_sigma", "flat_dmu", "flat_dnu", "second_flat",
]
