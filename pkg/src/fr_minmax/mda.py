"""Simultaneous entropic mirror descent-ascent (multiplicative weights).

    nu+ ∝ nu exp(-eta [dF/dnu + w log(nu/pi)]),    mu+ ∝ mu exp(eta [dF/dmu - w log(mu/rho)])

``w`` is the objective's regularization weight; in the discrete-time
convention it equals sigma, and w = 0 gives plain multiplicative weights.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .equilibrium import EquilibriumResult, c_sigma_sample, evaluate_ni, solve_mne
from .measure import GridMeasure, gibbs_normalize, kl_divergence
from .payoff import RegularizedObjective, Separable

log = logging.getLogger(__name__)

MDA_COLUMNS = ("n", "ni_error", "kl_sum_to_mne", "phi_integral_mu", "phi_integral_nu", "mass_err")


@dataclass(frozen=True)
class MdaConfig:
    eta: float = 0.1
    n_steps: int = 5000
    record_every: int = 1

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if int(self.n_steps) < 1 or int(self.record_every) < 1:
            raise ValueError("n_steps and record_every must be positive integers")

    def check(self, obj: RegularizedObjective) -> None:
        if obj.reg_weight * self.eta > 1.0:
            raise ValueError(f"step too large: reg weight * eta = {obj.reg_weight * self.eta:g} > 1")


def _mda_update(nu, mu, obj, eta):
    p, w = obj.payoff, obj.reg_weight
    h = nu.center(p.dnu_raw(nu, mu))
    g = mu.center(p.dmu_raw(nu, mu))
    if w > 0:
        h = h + w * (nu.log_density - obj.pi.log_density)
        g = g - w * (mu.log_density - obj.rho.log_density)
    try:
        nu_new, lz_n = gibbs_normalize(nu.log_density - eta * h, nu.grid)
        mu_new, lz_m = gibbs_normalize(mu.log_density + eta * g, mu.grid)
    except ValueError as exc:
        if "non-finite" in str(exc):
            raise FloatingPointError(f"non-finite exponent in the mirror step ({exc})") from exc
        raise
    return nu_new, mu_new, lz_n, lz_m


def mda_step(nu: GridMeasure, mu: GridMeasure, obj: RegularizedObjective, cfg: MdaConfig):
    """One simultaneous mirror descent-ascent step; returns (nu+, mu+)."""
    cfg.check(obj)
    obj.payoff.check(nu, mu)
    nu_new, mu_new, _, _ = _mda_update(nu, mu, obj, cfg.eta)
    return nu_new, mu_new


@dataclass
class MdaSeries:
    n: np.ndarray
    columns: dict
    final: tuple
    equilibrium: EquilibriumResult | None = None
    max_mass_drift: float = 0.0
    ni_clamped: int = 0
    c_sigma: float = float("nan")
    meta: dict = field(default_factory=dict)

    def column(self, name) -> np.ndarray:
        return self.columns[name]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MDA_COLUMNS)
            for i in range(len(self.n)):
                w.writerow([int(self.n[i])] + [format(float(self.columns[c][i]), ".17g") for c in MDA_COLUMNS[1:]])


def run_mda(nu0: GridMeasure, mu0: GridMeasure, obj: RegularizedObjective, cfg: MdaConfig,
            eq: EquilibriumResult | None = None, with_ni: bool = True) -> MdaSeries:
    """Iterate :func:`mda_step` and record diagnostics every ``record_every`` steps.

    The KL distance to the regularized MNE is recorded when w > 0 (the
    equilibrium is solved if not supplied); integrals of the potentials are
    recorded for separable games.  NaN marks a column that does not apply.
    """
    cfg.check(obj)
    obj.payoff.check(nu0, mu0)
    w = obj.reg_weight
    if w > 0 and eq is None:
        eq = solve_mne(obj)
    sep = isinstance(obj.payoff, Separable)
    rows = []
    clamped = 0
    max_drift = 0.0
    c_sigma = 0.0 if w > 0 else np.nan

    def record(n, nu, mu):
        nonlocal clamped, c_sigma
        if w > 0:
            c_sigma = max(c_sigma, c_sigma_sample(nu, mu, obj))
        ni = np.nan
        if with_ni:
            r = evaluate_ni(nu, mu, obj)
            ni, clamped = r.value, clamped + r.clamped
        kl = (kl_divergence(eq.nu_star, nu) + kl_divergence(eq.mu_star, mu)) if eq is not None else np.nan
        phi_mu = mu.integrate(obj.payoff.phi_y) if sep else np.nan
        phi_nu = nu.integrate(obj.payoff.phi_x) if sep else np.nan
        mass = max(abs(nu.mass - 1.0), abs(mu.mass - 1.0))
        rows.append((n, ni, kl, phi_mu, phi_nu, mass))

    nu, mu = nu0, mu0
    record(0, nu, mu)
    for n in range(1, cfg.n_steps + 1):
        nu, mu, lz_n, lz_m = _mda_update(nu, mu, obj, cfg.eta)
        max_drift = max(max_drift, abs(np.expm1(lz_n)), abs(np.expm1(lz_m)))
        if n % cfg.record_every == 0 or n == cfg.n_steps:
            record(n, nu, mu)
    arr = np.array(rows, dtype=float)
    cols = {name: arr[:, i] for i, name in enumerate(MDA_COLUMNS)}
    meta = {"eta": cfg.eta, "n_steps": cfg.n_steps, "reg_weight": w, "convention": obj.convention}
    return MdaSeries(arr[:, 0].astype(int), cols, (nu, mu), eq, max_drift, clamped, c_sigma, meta)
