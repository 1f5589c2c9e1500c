"""Named kernels, clipped potentials and reference potentials.

The generator names (``zero``, ``matching_pennies``, ``smooth_sin``,
``appendix_d_phi``, ``wgan_sin``) and potential names (``quadratic``,
``double_well``) are part of the config contract.
"""
from __future__ import annotations

import numpy as np

from .measure import Grid, GridMeasure, uniform_measure
from .payoff import Bilinear, Composite, Separable, outer_function

# the quadratic region ends at |x| = CLIP_RADIUS; beyond it phi saturates at 1/4
CLIP_RADIUS = 0.5
CLIP_LEVEL = 0.25


def clipped_half_square(r) -> np.ndarray:
    """phi(r) = r^2 / 2 for r <= 1/2, C^2-continued to saturate at 1/4.

    For r > 1/2 with s = r - 1/2:  phi = 1/4 - (1/8) exp(-4 s - 12 s^2).
    Value, slope and curvature match r^2/2 at r = 1/2, and phi < 1/4.
    """
    r = np.abs(np.asarray(r, dtype=float))
    s = np.maximum(r - CLIP_RADIUS, 0.0)
    outer = CLIP_LEVEL - 0.125 * np.exp(-4.0 * s - 12.0 * s ** 2)
    return np.where(r <= CLIP_RADIUS, 0.5 * r ** 2, outer)


def _norm(points: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(points ** 2, axis=1))


def _coord_sum(points: np.ndarray) -> np.ndarray:
    return np.sum(points, axis=1)


def zero_kernel(gx: Grid, gy: Grid) -> Bilinear:
    return Bilinear(np.zeros((gx.size, gy.size)), gx, gy)


def matching_pennies() -> Bilinear:
    g = Grid.finite(2)
    return Bilinear(np.array([[1.0, -1.0], [-1.0, 1.0]]), g, g)


def smooth_sin_kernel(gx: Grid, gy: Grid) -> np.ndarray:
    """f(x, y) = sin(2 pi (x - y)) (coordinates summed in 2-D)."""
    return np.sin(2 * np.pi * (_coord_sum(gx.points)[:, None] - _coord_sum(gy.points)[None, :]))


def smooth_sin(gx: Grid, gy: Grid) -> Bilinear:
    return Bilinear(smooth_sin_kernel(gx, gy), gx, gy)


def appendix_d_phi(gx: Grid, gy: Grid) -> Separable:
    return Separable(clipped_half_square(_norm(gx.points)), clipped_half_square(_norm(gy.points)), gx, gy)


def wgan_sin(gx: Grid, gy: Grid, lam=1.0, t=0.5, outer="tanh", baseline: GridMeasure | None = None) -> Composite:
    """Gradient-penalty GAN game with a 1-Lipschitz sine critic.

    Critic k(x, y) = sin(2 pi (x - y)) / (2 pi), so |d_x k| = |cos(2 pi (x - y))|
    and the penalty kernel (|d_x k| - 1)^2 is available in closed form.
    """
    arg = 2 * np.pi * (_coord_sum(gx.points)[:, None] - _coord_sum(gy.points)[None, :])
    k = np.sin(arg) / (2 * np.pi)
    pen = (np.abs(np.cos(arg)) - 1.0) ** 2
    if baseline is None:
        baseline = uniform_measure(gx)
    return Composite(k, pen, lam, t, outer_function(outer), baseline, gx, gy)


def load_kernel_csv(path) -> np.ndarray:
    """Kernel matrix from CSV: row = x index, column = y index."""
    K = np.loadtxt(path, delimiter=",", ndmin=2)
    return K


KERNEL_GENERATORS = ("zero", "matching_pennies", "smooth_sin", "appendix_d_phi", "wgan_sin")


def make_payoff(name: str, gx: Grid | None = None, gy: Grid | None = None, **kwargs):
    if name == "matching_pennies":
        return matching_pennies()
    if gx is None or gy is None:
        raise ValueError(f"generator {name!r} needs both grids")
    if name == "zero":
        return zero_kernel(gx, gy)
    if name == "smooth_sin":
        return smooth_sin(gx, gy)
    if name == "appendix_d_phi":
        return appendix_d_phi(gx, gy)
    if name == "wgan_sin":
        return wgan_sin(gx, gy, **kwargs)
    raise ValueError(f"unknown kernel generator {name!r}; choose from {KERNEL_GENERATORS}")


# --- potentials ------------------------------------------------------------------

def quadratic_potential(grid: Grid, scale=1.0, center=0.0) -> np.ndarray:
    """U(x) = scale * |x - center|^2 / 2."""
    c = np.broadcast_to(np.asarray(center, dtype=float), (grid.dim,))
    return 0.5 * scale * np.sum((grid.points - c) ** 2, axis=1)


def double_well_potential(grid: Grid, scale=1.0, center=0.0, width=0.5) -> np.ndarray:
    """U(x) = scale * (|x - center|^2 - width^2)^2."""
    c = np.broadcast_to(np.asarray(center, dtype=float), (grid.dim,))
    r2 = np.sum((grid.points - c) ** 2, axis=1)
    return scale * (r2 - width ** 2) ** 2


POTENTIALS = {"quadratic": quadratic_potential, "double_well": double_well_potential}


def make_potential(name: str, grid: Grid, **params) -> np.ndarray:
    try:
        fn = POTENTIALS[name]
    except KeyError:
        raise ValueError(f"unknown potential {name!r}; choose from {sorted(POTENTIALS)}") from None
    return fn(grid, **params)
