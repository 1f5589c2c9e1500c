"""Game functionals F(nu, mu), their flat derivatives and the regularized objective.

Three payoff families are supported:

* :class:`Bilinear` -- F = int int f(x, y) nu(dx) mu(dy)
* :class:`Separable` -- f(x, y) = phi_x(x) - phi_y(y), so F = int phi_x dnu - int phi_y dmu
* :class:`Composite` -- the gradient-penalty GAN objective

      F = int int k (nu - nubar) mu + lam t int int P (nu - nubar) mu
          + lam (1 - t) g(int int P nubar mu)

  with ``k`` the critic kernel, ``P`` the precomputed penalty kernel
  ``(|grad_x k| - 1)^2`` and ``g`` a concave outer function.

Flat derivatives returned by the public functions follow the zero-mean
convention: ``int dF/dnu(nu, mu, x) nu(dx) = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measure import (
    Grid,
    GridMeasure,
    GridMismatchError,
    ReferenceMeasure,
    gibbs_normalize,
    kl_divergence,
    mix,
    uniform_measure,
)
from .rng import named_rng


# --- outer functions for the composite payoff ---------------------------------

@dataclass(frozen=True)
class OuterFunction:
    name: str
    f: Callable[[float], float]
    df: Callable[[float], float]
    d2f: Callable[[float], float]


def _sech2(z):
    return 1.0 / np.cosh(z) ** 2


OUTER_FUNCTIONS = {
    "identity": OuterFunction("identity", lambda z: z, lambda z: 1.0, lambda z: 0.0),
    # concave on z >= 0, which is where the penalty integral lives
    "tanh": OuterFunction("tanh", np.tanh, _sech2, lambda z: -2.0 * np.tanh(z) * _sech2(z)),
    "log1p": OuterFunction("log1p", np.log1p, lambda z: 1.0 / (1.0 + z), lambda z: -1.0 / (1.0 + z) ** 2),
    "neg_exp": OuterFunction("neg_exp", lambda z: -np.exp(-z), lambda z: np.exp(-z), lambda z: -np.exp(-z)),
}


def outer_function(name: str) -> OuterFunction:
    try:
        return OUTER_FUNCTIONS[name]
    except KeyError:
        raise ValueError(f"unknown outer function {name!r}; choose from {sorted(OUTER_FUNCTIONS)}") from None


# --- payoff variants -----------------------------------------------------------

SECOND_SLOTS = ("nu_nu", "mu_mu", "mu_nu", "nu_mu")


class Payoff:
    """Common surface of the payoff variants.

    Subclasses implement the *raw* (uncentered) derivatives; centering is
    applied by the module-level functions.
    """

    grid_x: Grid
    grid_y: Grid
    affine_in_nu = True
    affine_in_mu = True
    name = "payoff"

    def check(self, nu: GridMeasure, mu: GridMeasure) -> None:
        if not nu.grid.same_as(self.grid_x):
            raise GridMismatchError(f"nu is not on the X grid of the {self.name} payoff")
        if not mu.grid.same_as(self.grid_y):
            raise GridMismatchError(f"mu is not on the Y grid of the {self.name} payoff")

    def value(self, nu, mu) -> float:
        raise NotImplementedError

    def dnu_raw(self, nu, mu) -> np.ndarray:
        raise NotImplementedError

    def dmu_raw(self, nu, mu) -> np.ndarray:
        raise NotImplementedError

    def second_raw(self, which, nu, mu) -> np.ndarray:
        raise NotImplementedError

    def linear_kernel(self) -> np.ndarray | None:
        """Kernel f(x, y) when F is exactly bilinear, else None."""
        return None


@dataclass(frozen=True, eq=False)
class Bilinear(Payoff):
    kernel: np.ndarray
    grid_x: Grid
    grid_y: Grid
    name = "bilinear"

    def __post_init__(self):
        K = np.array(self.kernel, dtype=float)
        if K.shape != (self.grid_x.size, self.grid_y.size):
            raise ValueError(f"kernel shape {K.shape} does not match grids "
                             f"({self.grid_x.size}, {self.grid_y.size})")
        if not np.all(np.isfinite(K)):
            raise ValueError("kernel entries must be finite")
        K.setflags(write=False)
        object.__setattr__(self, "kernel", K)

    def value(self, nu, mu):
        return float(nu.masses @ self.kernel @ mu.masses)

    def dnu_raw(self, nu, mu):
        return self.kernel @ mu.masses

    def dmu_raw(self, nu, mu):
        return nu.masses @ self.kernel

    def second_raw(self, which, nu, mu):
        if which == "nu_nu":
            return np.zeros((self.grid_x.size, self.grid_x.size))
        if which == "mu_mu":
            return np.zeros((self.grid_y.size, self.grid_y.size))
        if which == "mu_nu":
            return np.array(self.kernel)
        return np.array(self.kernel.T)

    def linear_kernel(self):
        return self.kernel


@dataclass(frozen=True, eq=False)
class Separable(Payoff):
    """Non-interacting game f(x, y) = phi_x(x) - phi_y(y)."""

    phi_x: np.ndarray
    phi_y: np.ndarray
    grid_x: Grid
    grid_y: Grid
    name = "separable"

    def __post_init__(self):
        for attr, grid in (("phi_x", self.grid_x), ("phi_y", self.grid_y)):
            v = np.array(getattr(self, attr), dtype=float).ravel()
            if v.size != grid.size or not np.all(np.isfinite(v)):
                raise ValueError(f"{attr} must be finite with one value per grid point")
            v.setflags(write=False)
            object.__setattr__(self, attr, v)

    def value(self, nu, mu):
        return nu.integrate(self.phi_x) - mu.integrate(self.phi_y)

    def dnu_raw(self, nu, mu):
        return np.array(self.phi_x)

    def dmu_raw(self, nu, mu):
        return -np.array(self.phi_y)

    def second_raw(self, which, nu, mu):
        nx, ny = self.grid_x.size, self.grid_y.size
        shape = {"nu_nu": (nx, nx), "mu_mu": (ny, ny), "mu_nu": (nx, ny), "nu_mu": (ny, nx)}[which]
        return np.zeros(shape)

    def linear_kernel(self):
        return self.phi_x[:, None] - self.phi_y[None, :]


@dataclass(frozen=True, eq=False)
class Composite(Payoff):
    kernel: np.ndarray
    penalty: np.ndarray
    lam: float
    t: float
    outer: OuterFunction
    baseline: GridMeasure
    grid_x: Grid
    grid_y: Grid
    name = "composite"
    affine_in_mu = False

    def __post_init__(self):
        shape = (self.grid_x.size, self.grid_y.size)
        for attr in ("kernel", "penalty"):
            K = np.array(getattr(self, attr), dtype=float)
            if K.shape != shape or not np.all(np.isfinite(K)):
                raise ValueError(f"{attr} must be a finite {shape} matrix")
            K.setflags(write=False)
            object.__setattr__(self, attr, K)
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError("t must lie in [0, 1]")
        if not self.baseline.grid.same_as(self.grid_x):
            raise GridMismatchError("baseline measure must live on the X grid")
        eff = self.kernel + self.lam * self.t * self.penalty
        eff.setflags(write=False)
        object.__setattr__(self, "_eff", eff)
        q = self.baseline.masses @ self.penalty
        q.setflags(write=False)
        object.__setattr__(self, "_q", q)
        object.__setattr__(self, "affine_in_mu", self.outer.name == "identity")

    @property
    def effective_kernel(self) -> np.ndarray:
        """Kernel multiplying (nu - nubar) x mu: k + lam t P."""
        return self._eff

    @property
    def penalty_profile(self) -> np.ndarray:
        """q(y) = int P(x, y) nubar(dx)."""
        return self._q

    def _z(self, mu):
        return float(self._q @ mu.masses)

    def value(self, nu, mu):
        diff = nu.masses - self.baseline.masses
        return float(diff @ self._eff @ mu.masses) + self.lam * (1 - self.t) * float(self.outer.f(self._z(mu)))

    def dnu_raw(self, nu, mu):
        return self._eff @ mu.masses

    def dmu_raw(self, nu, mu):
        diff = nu.masses - self.baseline.masses
        return diff @ self._eff + self.lam * (1 - self.t) * float(self.outer.df(self._z(mu))) * self._q

    def second_raw(self, which, nu, mu):
        if which == "nu_nu":
            return np.zeros((self.grid_x.size, self.grid_x.size))
        if which == "mu_mu":
            c = self.lam * (1 - self.t) * float(self.outer.d2f(self._z(mu)))
            return c * np.outer(self._q, self._q)
        if which == "mu_nu":
            return np.array(self._eff)
        return np.array(self._eff.T)


# --- flat derivatives and values -----------------------------------------------

def eval_f(payoff: Payoff, nu: GridMeasure, mu: GridMeasure) -> float:
    payoff.check(nu, mu)
    return payoff.value(nu, mu)


def flat_dnu(payoff: Payoff, nu: GridMeasure, mu: GridMeasure) -> np.ndarray:
    """dF/dnu(nu, mu, .) on the X grid, centered under nu."""
    payoff.check(nu, mu)
    return nu.center(payoff.dnu_raw(nu, mu))


def flat_dmu(payoff: Payoff, nu: GridMeasure, mu: GridMeasure) -> np.ndarray:
    """dF/dmu(nu, mu, .) on the Y grid, centered under mu."""
    payoff.check(nu, mu)
    return mu.center(payoff.dmu_raw(nu, mu))


def double_center(K: np.ndarray, row: GridMeasure, col: GridMeasure) -> np.ndarray:
    r, c = row.masses, col.masses
    return K - (r @ K)[None, :] - (K @ c)[:, None] + float(r @ K @ c)


def second_flat(payoff: Payoff, which: str, nu: GridMeasure, mu: GridMeasure) -> np.ndarray:
    """Second-order flat derivative kernel, centered in both arguments.

    ``which`` is one of ``nu_nu`` (x, x'), ``mu_mu`` (y, y'),
    ``mu_nu`` (x, y) -- the mu-derivative of dF/dnu -- or ``nu_mu`` (y, x),
    the nu-derivative of dF/dmu.
    """
    if which not in SECOND_SLOTS:
        raise ValueError(f"which must be one of {SECOND_SLOTS}")
    payoff.check(nu, mu)
    K = payoff.second_raw(which, nu, mu)
    row, col = {"nu_nu": (nu, nu), "mu_mu": (mu, mu), "mu_nu": (nu, mu), "nu_mu": (mu, nu)}[which]
    return double_center(K, row, col)


@dataclass(frozen=True)
class BoundConstants:
    c_nu: float
    c_mu: float
    c_nu_nu: float
    c_mu_mu: float
    c_nu_mu: float
    c_mu_nu: float

    @property
    def c_second_max(self) -> float:
        return max(self.c_nu_nu, self.c_mu_mu, self.c_nu_mu, self.c_mu_nu)

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in self.__dataclass_fields__}


def _random_gibbs(grid: Grid, rng: np.random.Generator, base=None) -> GridMeasure:
    amp = rng.uniform(0.2, 3.0)
    lw = amp * rng.standard_normal(grid.size)
    if base is not None:
        lw = lw + base.log_density
    return gibbs_normalize(lw, grid)[0]


def probe_measures(grid: Grid, ref: GridMeasure | None, n_random: int, rng) -> list[GridMeasure]:
    probes = [uniform_measure(grid)]
    if ref is not None:
        probes.append(ref)
    probes += [_random_gibbs(grid, rng, ref) for _ in range(n_random)]
    return probes


def bound_constants(payoff: Payoff, pi: GridMeasure | None = None, rho: GridMeasure | None = None,
                    n_random: int = 20, seed: int = 0) -> BoundConstants:
    """Grid-sup estimates of the first- and second-derivative bounds.

    Sups are taken over grid points and a fixed probe set of measures
    (uniform, the references, random Gibbs perturbations), so in general they
    are lower estimates of the true suprema.  For exactly bilinear payoffs the
    first-order sup over all measures is attained at point masses and is
    computed exactly.
    """
    rng = named_rng(seed, "bound_constants")
    px = probe_measures(payoff.grid_x, pi, n_random, rng)
    py = probe_measures(payoff.grid_y, rho, n_random, rng)
    # all pairs among the deterministic probes, then diagonal random pairs
    nd_x, nd_y = len(px) - n_random, len(py) - n_random
    pairs = [(a, b) for a in px[:nd_x] for b in py[:nd_y]] + list(zip(px[nd_x:], py[nd_y:]))

    c = dict(c_nu=0.0, c_mu=0.0, c_nu_nu=0.0, c_mu_mu=0.0, c_nu_mu=0.0, c_mu_nu=0.0)
    for nu, mu in pairs:
        c["c_nu"] = max(c["c_nu"], float(np.max(np.abs(flat_dnu(payoff, nu, mu)))))
        c["c_mu"] = max(c["c_mu"], float(np.max(np.abs(flat_dmu(payoff, nu, mu)))))
        for slot, key in (("nu_nu", "c_nu_nu"), ("mu_mu", "c_mu_mu"),
                          ("mu_nu", "c_mu_nu"), ("nu_mu", "c_nu_mu")):
            c[key] = max(c[key], float(np.max(np.abs(second_flat(payoff, slot, nu, mu)))))

    K = payoff.linear_kernel()
    if K is not None:
        c["c_nu"] = max(c["c_nu"], float(np.max(K.max(axis=0) - K.min(axis=0))))
        c["c_mu"] = max(c["c_mu"], float(np.max(K.max(axis=1) - K.min(axis=1))))
    return BoundConstants(**c)


@dataclass(frozen=True)
class FDCheck:
    eps: tuple
    errors: tuple
    worst: float


def check_flat_derivative_fd(payoff: Payoff, nu: GridMeasure, mu: GridMeasure, probe: GridMeasure,
                             slot: str = "nu", eps=(1e-4, 1e-5, 1e-6)) -> FDCheck:
    """Compare F(mix(m, probe, e)) - F(m) with e * int dF/dm d(probe - m).

    Errors are relative to the first-order term (absolute when that term
    vanishes).  For F smooth in the slot they shrink linearly in e.
    """
    payoff.check(nu, mu)
    base = payoff.value(nu, mu)
    if slot == "nu":
        m, deriv = nu, flat_dnu(payoff, nu, mu)
    elif slot == "mu":
        m, deriv = mu, flat_dmu(payoff, nu, mu)
    else:
        raise ValueError("slot must be 'nu' or 'mu'")
    lin = float(deriv @ (probe.masses - m.masses))
    errors = []
    for e in eps:
        m_e = mix(m, probe, e)
        val = payoff.value(m_e, mu) if slot == "nu" else payoff.value(nu, m_e)
        diff = (val - base) - e * lin
        scale = abs(e * lin)
        errors.append(abs(diff) / scale if scale > 1e-300 else abs(diff))
    return FDCheck(tuple(eps), tuple(errors), max(errors))


# --- regularized objective -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RegularizedObjective:
    """F plus entropic terms reg_weight * (KL(nu|pi) - KL(mu|rho)).

    The main-text convention weights the KL terms by sigma^2 / 2; the
    discrete-time example uses sigma.  Build through :meth:`main_text` or
    :meth:`appendix_d` so the convention is recorded.
    """

    payoff: Payoff
    pi: ReferenceMeasure
    rho: ReferenceMeasure
    reg_weight: float
    sigma: float
    convention: str = "main_text"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.reg_weight < 0 or not np.isfinite(self.reg_weight):
            raise ValueError("regularization weight must be finite and >= 0")
        if not self.pi.grid.same_as(self.payoff.grid_x):
            raise GridMismatchError("pi must live on the X grid")
        if not self.rho.grid.same_as(self.payoff.grid_y):
            raise GridMismatchError("rho must live on the Y grid")

    @classmethod
    def main_text(cls, payoff, sigma, pi, rho):
        return cls(payoff, pi, rho, 0.5 * sigma ** 2, sigma, "main_text")

    @classmethod
    def appendix_d(cls, payoff, sigma, pi, rho):
        return cls(payoff, pi, rho, float(sigma), sigma, "appendix_d")

    def with_reg_weight(self, w: float) -> "RegularizedObjective":
        return RegularizedObjective(self.payoff, self.pi, self.rho, w, self.sigma, self.convention)

    def require_positive(self):
        if not self.reg_weight > 0:
            raise ValueError(f"operation needs sigma > 0 (got reg weight {self.reg_weight})")

    def bounds(self) -> BoundConstants:
        if "bounds" not in self._cache:
            self._cache["bounds"] = bound_constants(self.payoff, self.pi.measure, self.rho.measure)
        return self._cache["bounds"]


def eval_v_sigma(obj: RegularizedObjective, nu: GridMeasure, mu: GridMeasure) -> float:
    obj.require_positive()
    F = eval_f(obj.payoff, nu, mu)
    return F + obj.reg_weight * (kl_divergence(nu, obj.pi.measure) - kl_divergence(mu, obj.rho.measure))


def drift_a(obj: RegularizedObjective, nu: GridMeasure, mu: GridMeasure) -> np.ndarray:
    """dF/dnu + w log(nu/pi) - w KL(nu|pi), integrating to zero under nu."""
    obj.require_positive()
    obj.payoff.check(nu, mu)
    a = obj.payoff.dnu_raw(nu, mu) + obj.reg_weight * (nu.log_density - obj.pi.log_density)
    return nu.center(a)


def drift_b(obj: RegularizedObjective, nu: GridMeasure, mu: GridMeasure) -> np.ndarray:
    """dF/dmu - w log(mu/rho) + w KL(mu|rho), integrating to zero under mu."""
    obj.require_positive()
    obj.payoff.check(nu, mu)
    b = obj.payoff.dmu_raw(nu, mu) - obj.reg_weight * (mu.log_density - obj.rho.log_density)
    return mu.center(b)
