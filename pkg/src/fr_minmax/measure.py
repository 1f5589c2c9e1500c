"""Probability measures on quadrature grids, stored in the log domain.

A :class:`GridMeasure` holds ``log_density`` values relative to the
quadrature weights of its :class:`Grid`, so that ``sum(w * exp(log_density))``
is one.  Everything downstream (payoffs, flows, equilibrium solvers) works on
these objects.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# floor for user-supplied raw densities; dynamics never need one
DENSITY_FLOOR = 1e-300
_MASS_TOL = 1e-10


class GridMismatchError(ValueError):
    pass


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Grid:
    """Quadrature nodes in a compact box of R^d (d = 1 or 2) plus weights."""

    points: np.ndarray
    weights: np.ndarray
    descriptor: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.ndim != 2 or pts.shape[0] != w.size:
            raise ValueError("points and weights disagree in length")
        if w.size == 0:
            raise ValueError("empty grid")
        if not np.all(np.isfinite(pts)):
            raise ValueError("grid points must be finite")
        if not np.all(w > 0) or not np.all(np.isfinite(w)):
            raise ValueError("quadrature weights must be finite and strictly positive")
        if np.unique(pts, axis=0).shape[0] != pts.shape[0]:
            raise ValueError("grid points must be pairwise distinct")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)

    @property
    def volume(self) -> float:
        return float(self.weights.sum())

    @property
    def is_finite_set(self) -> bool:
        return self.descriptor.startswith("finite")

    def integrate(self, values) -> float:
        return float(self.weights @ np.asarray(values, dtype=float))

    def same_as(self, other: "Grid") -> bool:
        if other is self:
            return True
        return (
            other.size == self.size
            and np.array_equal(other.points, self.points)
            and np.array_equal(other.weights, self.weights)
        )

    @classmethod
    def uniform(cls, lo: float, hi: float, n: int) -> "Grid":
        """1-D uniform grid with trapezoidal weights."""
        if n < 2 or not hi > lo:
            raise ValueError("need n >= 2 and hi > lo")
        x = np.linspace(lo, hi, n)
        h = (hi - lo) / (n - 1)
        w = np.full(n, h)
        w[0] = w[-1] = 0.5 * h
        return cls(x, w, f"uniform1d[{lo:g},{hi:g}]x{n}")

    @classmethod
    def box(cls, bounds, n) -> "Grid":
        """Product trapezoidal grid on a 2-D box ``[(lo0, hi0), (lo1, hi1)]``."""
        (a0, b0), (a1, b1) = bounds
        n0, n1 = (n, n) if np.isscalar(n) else n
        g0, g1 = cls.uniform(a0, b0, n0), cls.uniform(a1, b1, n1)
        X0, X1 = np.meshgrid(g0.points[:, 0], g1.points[:, 0], indexing="ij")
        pts = np.column_stack([X0.ravel(), X1.ravel()])
        w = np.outer(g0.weights, g1.weights).ravel()
        return cls(pts, w, f"box2d[{a0:g},{b0:g}]x[{a1:g},{b1:g}]x{n0}x{n1}")

    @classmethod
    def finite(cls, n: int) -> "Grid":
        """Finite strategy set {0, ..., n-1}; quadrature is plain summation."""
        return cls(np.arange(n, dtype=float), np.ones(n), f"finite{n}")


def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + float(np.log(np.sum(np.exp(x - m))))


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """Strictly positive probability density on ``grid``.

    ``log_density`` is the natural log of the density with respect to the
    quadrature weights.  Use :func:`gibbs_normalize` or the helper
    constructors rather than building one directly.
    """

    grid: Grid
    log_density: np.ndarray = field(repr=False)

    def __post_init__(self):
        ld = np.asarray(self.log_density, dtype=float).ravel()
        if ld.size != self.grid.size:
            raise GridMismatchError("log_density length does not match grid")
        bad = np.flatnonzero(~np.isfinite(ld))
        if bad.size:
            raise ValueError(f"non-finite log density at index {int(bad[0])}")
        object.__setattr__(self, "log_density", _frozen(ld))
        err = abs(self.mass - 1.0)
        if err > _MASS_TOL:
            raise ValueError(f"measure not normalized (|mass - 1| = {err:.3g})")

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    @property
    def masses(self) -> np.ndarray:
        """Point masses w_i * p_i (these sum to one)."""
        return self.grid.weights * np.exp(self.log_density)

    @property
    def mass(self) -> float:
        return float(np.sum(self.masses))

    def integrate(self, values) -> float:
        return float(self.masses @ np.asarray(values, dtype=float))

    def center(self, values) -> np.ndarray:
        """Subtract the mean of ``values`` under this measure."""
        values = np.asarray(values, dtype=float)
        return values - self.integrate(values)


@dataclass(frozen=True, eq=False)
class ReferenceMeasure:
    """Gibbs reference measure proportional to exp(-potential)."""

    potential: np.ndarray
    measure: GridMeasure

    @property
    def grid(self) -> Grid:
        return self.measure.grid

    @property
    def log_density(self) -> np.ndarray:
        return self.measure.log_density


def check_same_grid(p: GridMeasure, q: GridMeasure) -> None:
    if not p.grid.same_as(q.grid):
        raise GridMismatchError(
            f"measures live on different grids ({p.grid.descriptor!r} vs {q.grid.descriptor!r})"
        )


def gibbs_normalize(log_weights, grid: Grid) -> tuple[GridMeasure, float]:
    """Normalize ``exp(log_weights)`` against the quadrature of ``grid``.

    Returns the measure and ``log Z`` with ``Z = sum_i w_i exp(log_weights_i)``.
    """
    lw = np.asarray(log_weights, dtype=float).ravel()
    if lw.size != grid.size:
        raise GridMismatchError("log_weights length does not match grid")
    bad = np.flatnonzero(~np.isfinite(lw))
    if bad.size:
        raise ValueError(f"non-finite log weight at index {int(bad[0])}: {lw[bad[0]]}")
    log_z = _logsumexp(lw + grid.log_weights)
    return GridMeasure(grid, lw - log_z), log_z


def uniform_measure(grid: Grid) -> GridMeasure:
    return gibbs_normalize(np.zeros(grid.size), grid)[0]


def from_density(grid: Grid, density) -> GridMeasure:
    """Ingest a raw (unnormalized, nonnegative) density, flooring zeros."""
    d = np.asarray(density, dtype=float).ravel()
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("density must be finite and nonnegative")
    return gibbs_normalize(np.log(np.maximum(d, DENSITY_FLOOR)), grid)[0]


def reference_from_potential(grid: Grid, potential) -> ReferenceMeasure:
    U = _frozen(np.asarray(potential, dtype=float).ravel())
    return ReferenceMeasure(U, gibbs_normalize(-U, grid)[0])


def _kl_terms(d: np.ndarray) -> np.ndarray:
    # e^d (d - 1) + 1 >= 0; the series avoids cancellation near d = 0
    out = np.empty_like(d)
    small = np.abs(d) < 1e-2
    x = d[small]
    out[small] = x * x * (0.5 + x * (1 / 3 + x * (1 / 8 + x * (1 / 30 + x * (1 / 144 + x / 840)))))
    y = d[~small]
    out[~small] = np.exp(y) * (y - 1.0) + 1.0
    return out


def kl_divergence(p: GridMeasure, q: GridMeasure) -> float:
    """KL(p | q) = sum_i w_i p_i log(p_i / q_i).

    Summed as sum_i w_i q_i phi(log(p_i / q_i)) with phi(d) = e^d (d - 1) + 1,
    which is the same quantity for normalized p, q but has nonnegative terms,
    so small divergences are resolved well below machine epsilon.
    """
    check_same_grid(p, q)
    d = p.log_density - q.log_density
    return float(q.masses @ _kl_terms(d))


def tv_distance(p: GridMeasure, q: GridMeasure) -> float:
    check_same_grid(p, q)
    val = 0.5 * float(np.sum(np.abs(p.masses - q.masses)))
    return min(val, 1.0)


def density_ratio_bounds(m: GridMeasure, ref: GridMeasure) -> tuple[float, float]:
    """(inf, sup) over the grid of m / ref."""
    check_same_grid(m, ref)
    lr = m.log_density - ref.log_density
    return float(np.exp(lr.min())), float(np.exp(lr.max()))


def mix(p: GridMeasure, q: GridMeasure, eps: float) -> GridMeasure:
    """The mixture (1 - eps) p + eps q."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"mixing weight {eps} outside [0, 1]")
    check_same_grid(p, q)
    if eps == 0.0:
        return p
    if eps == 1.0:
        return q
    lw = np.logaddexp(np.log1p(-eps) + p.log_density, np.log(eps) + q.log_density)
    return gibbs_normalize(lw, p.grid)[0]


def log_ratio(m: GridMeasure, ref: GridMeasure) -> np.ndarray:
    check_same_grid(m, ref)
    return m.log_density - ref.log_density


# --- CSV serialization -------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_measure_csv(path, m: GridMeasure) -> None:
    """Write ``index,x0[,x1],weight,log_density`` rows (round-trip exact)."""
    d = m.grid.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", *[f"x{k}" for k in range(d)], "weight", "log_density"])
        for i in range(m.grid.size):
            w.writerow([i, *[_fmt(c) for c in m.grid.points[i]],
                        _fmt(m.grid.weights[i]), _fmt(m.log_density[i])])


def read_measure_csv(path, descriptor: str | None = None) -> GridMeasure:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[0] != "index" or header[-2:] != ["weight", "log_density"]:
        raise ValueError(f"{path}: unexpected header {header}")
    arr = np.array([[float(v) for v in r] for r in body], dtype=float)
    order = np.argsort(arr[:, 0], kind="stable")
    arr = arr[order]
    grid = Grid(arr[:, 1:-2], arr[:, -2], descriptor or f"csv:{path.name}")
    return GridMeasure(grid, arr[:, -1])
