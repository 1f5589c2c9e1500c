"""Mixed Nash equilibria, Nikaido-Isoda error and Lyapunov diagnostics.

The regularized MNE is the fixed point of the Gibbs best-response pair

    nu ∝ pi  exp(-dF/dnu(nu, mu) / w),    mu ∝ rho exp(dF/dmu(nu, mu) / w)

with ``w`` the regularization weight.  :func:`solve_mne` finds it by damped
iteration in log-density space.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .measure import (
    GridMeasure,
    gibbs_normalize,
    kl_divergence,
    tv_distance,
    write_measure_csv,
)
from .payoff import RegularizedObjective, _random_gibbs, eval_v_sigma
from .rng import named_rng

log = logging.getLogger(__name__)

NI_CLAMP = 1e-10
INNER_TOL = 1e-10
INNER_MAX_ITERS = 100_000
CONSTANT_KEYS = ("c_nu", "c_mu", "c_sigma", "r1_nu", "r1_mu", "R1_nu", "R1_mu", "cv_nu", "cv_mu")


# --- best responses ----------------------------------------------------------------

def best_response_nu(mu: GridMeasure, obj: RegularizedObjective, nu: GridMeasure | None = None) -> GridMeasure:
    """Gibbs response pi exp(-dF/dnu(nu, mu) / w) / Z.

    ``nu`` only matters for payoffs that are not affine in nu; it defaults
    to pi.
    """
    obj.require_positive()
    nu = obj.pi.measure if nu is None else nu
    obj.payoff.check(nu, mu)
    h = obj.payoff.dnu_raw(nu, mu)
    return gibbs_normalize(obj.pi.log_density - h / obj.reg_weight, nu.grid)[0]


def best_response_mu(nu: GridMeasure, obj: RegularizedObjective, mu: GridMeasure | None = None) -> GridMeasure:
    """Gibbs response rho exp(dF/dmu(nu, mu) / w) / Z (``mu`` defaults to rho)."""
    obj.require_positive()
    mu = obj.rho.measure if mu is None else mu
    obj.payoff.check(nu, mu)
    g = obj.payoff.dmu_raw(nu, mu)
    return gibbs_normalize(obj.rho.log_density + g / obj.reg_weight, mu.grid)[0]


# --- constants bundle ------------------------------------------------------------

def _side_constants(log_ratio_range, c, w):
    # (r, R) of a measure against its reference, then the propagated envelopes
    lo, hi = log_ratio_range
    log_R = max(hi, 1e-12)
    r1 = np.exp(min(lo, 0.0) - c / w)
    R1 = 1.0 + np.exp(min(3.0 * log_R + 3.0 * c / w, 700.0))
    cv = 3.0 * c + w * (max(abs(np.log(r1)), np.log(R1)) + 2.0 * log_R)
    return float(r1), float(R1), float(cv)


def constants_bundle(obj: RegularizedObjective, nu0: GridMeasure, mu0: GridMeasure) -> dict:
    """Derivative bounds and envelope constants for the initial pair (nu0, mu0).

    ``c_sigma`` here is the a priori value max(cv_nu, cv_mu); see
    :func:`estimate_c_sigma` for the sharper trajectory-based estimate.
    """
    obj.require_positive()
    b = obj.bounds()
    w = obj.reg_weight
    lr_nu = nu0.log_density - obj.pi.log_density
    lr_mu = mu0.log_density - obj.rho.log_density
    r1n, R1n, cvn = _side_constants((lr_nu.min(), lr_nu.max()), b.c_nu, w)
    r1m, R1m, cvm = _side_constants((lr_mu.min(), lr_mu.max()), b.c_mu, w)
    return dict(c_nu=b.c_nu, c_mu=b.c_mu, c_sigma=max(cvn, cvm), r1_nu=r1n, r1_mu=r1m,
                R1_nu=R1n, R1_mu=R1m, cv_nu=cvn, cv_mu=cvm)


def c_sigma_sample(nu: GridMeasure, mu: GridMeasure, obj: RegularizedObjective) -> float:
    """Bound on |dV/dnu(nu, .)| and |dV/dmu(., mu)| at one sample.

    The entropic part w (log(m/ref) - KL(m|ref)) is exact; the payoff part is
    bounded uniformly in the opponent by C_nu (resp. C_mu).
    """
    b = obj.bounds()
    w = obj.reg_weight
    lr = nu.log_density - obj.pi.log_density
    c1 = b.c_nu + w * float(np.max(np.abs(lr - kl_divergence(nu, obj.pi.measure))))
    lr = mu.log_density - obj.rho.log_density
    c2 = b.c_mu + w * float(np.max(np.abs(lr - kl_divergence(mu, obj.rho.measure))))
    return max(c1, c2)


def estimate_c_sigma(states, obj: RegularizedObjective) -> float:
    """Grid-sup estimate of C_sigma along a sequence of states (``.nu``, ``.mu``)."""
    obj.require_positive()
    return max(c_sigma_sample(s.nu, s.mu, obj) for s in states)


# --- solver ------------------------------------------------------------------------

@dataclass
class EquilibriumResult:
    nu_star: GridMeasure
    mu_star: GridMeasure
    residual_tv: float
    iterations: int
    converged: bool
    damping: float
    constants: dict = field(default_factory=dict)
    residual_history: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {
            "residual_tv": float(self.residual_tv),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "damping": float(self.damping),
            "constants": {k: float(self.constants[k]) for k in CONSTANT_KEYS if k in self.constants},
        }


def default_damping(obj: RegularizedObjective) -> float:
    c2 = obj.bounds().c_second_max
    w = obj.reg_weight
    return min(1.0, w / (w + c2)) if c2 > 0 else 1.0


def _residual(nu, mu, obj):
    return max(tv_distance(nu, best_response_nu(mu, obj, nu)), tv_distance(mu, best_response_mu(nu, obj, mu)))


def solve_mne(obj: RegularizedObjective, damping: float | None = None, tol: float = 1e-12,
              max_iter: int = 100_000, nu0: GridMeasure | None = None,
              mu0: GridMeasure | None = None) -> EquilibriumResult:
    """Damped simultaneous best-response iteration from (pi, rho).

    Each sweep sets log nu <- (1 - theta) log nu + theta log BR_nu, and the
    same for mu, then renormalizes.  Converged once both best-response TV
    residuals are at most ``tol``.
    """
    obj.require_positive()
    theta = default_damping(obj) if damping is None else float(damping)
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"damping must lie in (0, 1], got {theta}")
    nu = obj.pi.measure if nu0 is None else nu0
    mu = obj.rho.measure if mu0 is None else mu0
    history = []
    it = 0
    res = _residual(nu, mu, obj)
    history.append(res)
    while res > tol and it < max_iter:
        br_nu = best_response_nu(mu, obj, nu)
        br_mu = best_response_mu(nu, obj, mu)
        nu = gibbs_normalize((1 - theta) * nu.log_density + theta * br_nu.log_density, nu.grid)[0]
        mu = gibbs_normalize((1 - theta) * mu.log_density + theta * br_mu.log_density, mu.grid)[0]
        it += 1
        res = _residual(nu, mu, obj)
        history.append(res)
        if not np.isfinite(res):
            break
    converged = res <= tol
    if not converged:
        log.warning("solve_mne stopped after %d iterations with residual %.3e (tol %.1e)", it, res, tol)
    consts = constants_bundle(obj, nu, mu)
    return EquilibriumResult(nu, mu, res, it, converged, theta, consts, history)


def write_equilibrium(eq: EquilibriumResult, directory, extra: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_measure_csv(d / "nu_star.csv", eq.nu_star)
    write_measure_csv(d / "mu_star.csv", eq.mu_star)
    doc = eq.to_json()
    if extra:
        doc.update(extra)
    (d / "equilibrium.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --- Nikaido-Isoda error -------------------------------------------------------------

@dataclass(frozen=True)
class NIResult:
    value: float
    method: str  # "closed_form" or "iterative"
    clamped: bool
    raw: float
    inner_iterations: int = 0


def _max_mu_iterative(nu, mu, obj):
    """max over mu' of F(nu, mu') - w KL(mu'|rho) by entropic mirror ascent."""
    p, w = obj.payoff, obj.reg_weight
    lo, hi = float(np.min(p.penalty_profile)), float(np.max(p.penalty_profile))
    zs = np.linspace(lo, hi, 64)
    curv = float(np.max(np.abs(p.outer.d2f(zs)))) if hi > lo else 0.0
    L = p.lam * (1 - p.t) * curv * (hi - lo) ** 2
    eta = 1.0 / (w + L)
    cur = obj.rho.measure
    for k in range(1, INNER_MAX_ITERS + 1):
        g = p.dmu_raw(nu, cur)
        br = gibbs_normalize(obj.rho.log_density + g / w, cur.grid)[0]
        if tv_distance(cur, br) <= INNER_TOL:
            return p.value(nu, cur) - w * kl_divergence(cur, obj.rho.measure), k
        step = (1 - eta * w) * cur.log_density + eta * w * obj.rho.log_density + eta * g
        cur = gibbs_normalize(step, cur.grid)[0]
    raise RuntimeError(f"inner mirror ascent did not reach {INNER_TOL:g} in {INNER_MAX_ITERS} iterations")


def evaluate_ni(nu: GridMeasure, mu: GridMeasure, obj: RegularizedObjective) -> NIResult:
    """NI(nu, mu) = max_mu' V(nu, mu') - min_nu' V(nu', mu).

    When F is affine in a slot the inner optimum is the Gibbs best response
    and the gap V(best) - V(current) equals w KL(current | best response);
    otherwise the inner problem is solved by mirror ascent.  With zero regularization and a payoff affine in both slots the
    inner optima are point masses.
    """
    p, w = obj.payoff, obj.reg_weight
    p.check(nu, mu)
    if not (p.affine_in_nu or w > 0):
        raise ValueError("NI needs either w > 0 or a payoff affine in nu")
    method, inner = "closed_form", 0
    if w == 0:
        if not (p.affine_in_nu and p.affine_in_mu):
            raise ValueError("NI with zero regularization is only supported for affine payoffs")
        # the inner optima are point masses
        h = p.dnu_raw(nu, mu)
        g = p.dmu_raw(nu, mu)
        raw = float(np.max(g) - mu.integrate(g) - (np.min(h) - nu.integrate(h)))
    else:
        # for F affine in a slot the inner gap is w KL(m | Gibbs best response)
        gap_nu = w * kl_divergence(nu, best_response_nu(mu, obj, nu))
        if p.affine_in_mu:
            gap_mu = w * kl_divergence(mu, best_response_mu(nu, obj, mu))
        else:
            best, inner = _max_mu_iterative(nu, mu, obj)
            gap_mu = best - (p.value(nu, mu) - w * kl_divergence(mu, obj.rho.measure))
            method = "iterative"
        raw = float(gap_nu + gap_mu)
    if raw < -NI_CLAMP:
        raise ArithmeticError(f"negative NI error {raw:.3e} beyond rounding tolerance")
    clamped = raw < 0
    return NIResult(max(raw, 0.0), method, clamped, raw, inner)


def ni_error(nu: GridMeasure, mu: GridMeasure, obj: RegularizedObjective) -> float:
    return evaluate_ni(nu, mu, obj).value


# --- Lyapunov series and rate fits -----------------------------------------------------

@dataclass
class LyapunovSeries:
    times: np.ndarray
    kl_sum: np.ndarray
    ni: np.ndarray
    ni_clamped: int = 0
    ni_method: str = "closed_form"


def lyapunov_series(states, times, eq: EquilibriumResult, obj: RegularizedObjective,
                    with_ni: bool = True) -> LyapunovSeries:
    """KL(nu*|nu_t) + KL(mu*|mu_t) and NI(nu_t, mu_t) for every sample."""
    if not eq.converged:
        raise ValueError("lyapunov_series needs a converged equilibrium")
    kl = np.array([kl_divergence(eq.nu_star, s.nu) + kl_divergence(eq.mu_star, s.mu) for s in states])
    ni = np.full(len(states), np.nan)
    clamped = 0
    method = "closed_form"
    if with_ni:
        for i, s in enumerate(states):
            r = evaluate_ni(s.nu, s.mu, obj)
            ni[i] = r.value
            clamped += r.clamped
            method = r.method
    return LyapunovSeries(np.asarray(times, dtype=float), kl, ni, clamped, method)


def gronwall_violations(series: LyapunovSeries, obj: RegularizedObjective, dt: float) -> list:
    """Sample indices where dL/dt <= -w L + 10 dt (1 + L) fails (forward differences)."""
    L, t = series.kl_sum, series.times
    rate = np.diff(L) / np.diff(t)
    bound = -obj.reg_weight * L[:-1] + 10.0 * dt * (1.0 + L[:-1])
    return [int(i) for i in np.flatnonzero(rate > bound)]


@dataclass(frozen=True)
class RateFit:
    window: tuple
    fitted_rate: float
    r_squared: float
    n_points: int


def fit_decay_rate(times, values, window: tuple | None = None, floor: float = 1e-12) -> RateFit:
    """Least-squares fit of log(values) = c - rate * t.

    By default the window is the last half of the samples lying above
    ``floor``; an explicit ``(t_lo, t_hi)`` window is used as given.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if window is None:
        idx = np.flatnonzero(np.isfinite(v) & (v > floor))
        idx = idx[len(idx) // 2:]
    else:
        lo, hi = window
        idx = np.flatnonzero((t >= lo) & (t <= hi))
        if np.any(~(v[idx] > 0)):
            raise ValueError("series must be strictly positive on the fit window")
    if idx.size < 4:
        raise ValueError(f"need at least 4 points in the fit window, got {idx.size}")
    tt, yy = t[idx], np.log(v[idx])
    slope, icpt = np.polyfit(tt, yy, 1)
    resid = yy - (slope * tt + icpt)
    ss_tot = float(np.sum((yy - yy.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit((float(tt[0]), float(tt[-1])), float(-slope), r2, int(idx.size))


# --- saddle audit -------------------------------------------------------------------

@dataclass(frozen=True)
class AuditResult:
    worst_slack: float
    worst_side: str
    n_probes: int


def saddle_audit(eq, obj: RegularizedObjective, n_probes: int = 1000, seed: int = 0) -> AuditResult:
    """Worst slack of V(nu*, mu) <= V(nu*, mu*) <= V(nu, mu*) over probes.

    ``eq`` is an :class:`EquilibriumResult` or a candidate ``(nu, mu)`` pair.
    Probes are random Gibbs perturbations of the candidate plus the exact
    best responses to it, so a non-equilibrium pair is always caught.
    """
    obj.require_positive()
    nu_s, mu_s = (eq.nu_star, eq.mu_star) if isinstance(eq, EquilibriumResult) else eq
    rng = named_rng(seed, "saddle_audit")
    v0 = eval_v_sigma(obj, nu_s, mu_s)
    worst, side = np.inf, ""
    probes_nu = [best_response_nu(mu_s, obj, nu_s)]
    probes_mu = [best_response_mu(nu_s, obj, mu_s)]
    for _ in range(n_probes):
        probes_nu.append(_random_gibbs(nu_s.grid, rng, nu_s))
        probes_mu.append(_random_gibbs(mu_s.grid, rng, mu_s))
    for nu in probes_nu:
        s = eval_v_sigma(obj, nu, mu_s) - v0
        if s < worst:
            worst, side = s, "nu"
    for mu in probes_mu:
        s = v0 - eval_v_sigma(obj, nu_s, mu)
        if s < worst:
            worst, side = s, "mu"
    return AuditResult(float(worst), side, n_probes)
