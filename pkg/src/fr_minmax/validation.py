"""Quantitative checks of decay rates, envelopes and equilibrium properties.

Each check returns a :class:`Check` record; :func:`run_suite` runs the full
validation battery used by ``fr-minmax validate`` and the acceptance tests.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from .equilibrium import (
    EquilibriumResult,
    estimate_c_sigma,
    fit_decay_rate,
    gronwall_violations,
    lyapunov_series,
    saddle_audit,
    ni_error,
    solve_mne,
)
from .flow import IntegratorConfig, Trajectory, integrate, path_tv_distance, picard_solve
from .games import appendix_d_phi, matching_pennies, quadratic_potential, smooth_sin, wgan_sin
from .mda import MdaConfig, MdaSeries, run_mda
from .measure import Grid, gibbs_normalize, kl_divergence, reference_from_potential, tv_distance
from .payoff import (
    RegularizedObjective,
    _random_gibbs,
    check_flat_derivative_fd,
    drift_a,
    drift_b,
    eval_v_sigma,
)
from .rng import named_rng

log = logging.getLogger(__name__)

KL_MARGIN = 1.02
NI_MARGIN = 1.05
RATE_FRACTION = 0.95
# KL to a computed MNE is only resolvable down to about (solver tol)^2 ~ 1e-24;
# envelope comparisons treat anything below this floor as zero
EVAL_FLOOR = 1e-20
PHI_BAND = (0.5, 2.0)
PHI_WINDOW = (100, 5000)
SADDLE_TOL = -1e-8
NI_AT_MNE_TOL = 1e-8
MNE_RESIDUAL_TOL = 1e-10
CONVEXITY_TOL = -1e-9


@dataclass
class Check:
    name: str
    module: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.module}.{self.name}: value={self.value:.6g} threshold={self.threshold:.6g} {self.detail}".rstrip()

    def as_dict(self) -> dict:
        d = asdict(self)
        d["value"] = float(d["value"])
        d["threshold"] = float(d["threshold"])
        return d


def _worst_ratio(values, envelope):
    # largest value / max(envelope, floor); <= 1 means the envelope holds everywhere
    return float(np.max(np.asarray(values) / np.maximum(envelope, EVAL_FLOOR)))


# --- standard setups --------------------------------------------------------------

def offset_gaussians(grid: Grid, scale=20.0, centers=(0.25, 0.75)):
    nu0 = reference_from_potential(grid, quadratic_potential(grid, scale, centers[0])).measure
    mu0 = reference_from_potential(grid, quadratic_potential(grid, scale, centers[1])).measure
    return nu0, mu0


def smooth_sin_setup(n=256, sigma=1.0):
    g = Grid.uniform(0.0, 1.0, n)
    u = reference_from_potential(g, np.zeros(n))
    obj = RegularizedObjective.main_text(smooth_sin(g, g), sigma, u, u)
    return obj, *offset_gaussians(g)


def appendix_d_setup(sigma=0.0, n=2001):
    g = Grid.uniform(-1.0, 1.0, n)
    u = reference_from_potential(g, np.zeros(n))
    obj = RegularizedObjective.appendix_d(appendix_d_phi(g, g), sigma, u, u)
    return obj, u.measure, u.measure


def matching_pennies_setup(sigma=1.0):
    p = matching_pennies()
    u = reference_from_potential(p.grid_x, np.zeros(2))
    obj = RegularizedObjective.main_text(p, sigma, u, u)
    nu0 = gibbs_normalize(np.array([np.log(0.8), np.log(0.2)]), p.grid_x)[0]
    mu0 = gibbs_normalize(np.array([np.log(0.3), np.log(0.7)]), p.grid_y)[0]
    return obj, nu0, mu0


# --- flow checks ---------------------------------------------------------------------

@dataclass
class FlowReport:
    checks: list
    metrics: dict


def flow_checks(traj: Trajectory, obj: RegularizedObjective, eq: EquilibriumResult, prefix="flow") -> FlowReport:
    """KL and NI envelopes, fitted rates, ratio envelopes, Gronwall and mass drift."""
    w = obj.reg_weight
    ly = lyapunov_series(traj.states, traj.times, eq, obj)
    t = ly.times
    kl0 = ly.kl_sum[0]
    c_sigma = estimate_c_sigma(traj.states, obj)
    kl_env = KL_MARGIN * np.exp(-w * t) * kl0
    ni_env = NI_MARGIN * 2.0 * c_sigma * np.exp(-0.5 * w * t) * np.sqrt(kl0)
    kl_fit = fit_decay_rate(t, ly.kl_sum)
    ni_fit = fit_decay_rate(t, ly.ni)
    drift_limit = 10.0 * traj.dt ** 2
    gron = gronwall_violations(ly, obj, traj.dt)
    checks = [
        Check("kl_envelope", prefix, _worst_ratio(ly.kl_sum, kl_env) <= 1.0, _worst_ratio(ly.kl_sum, kl_env), 1.0,
              f"kl_sum <= {KL_MARGIN} exp(-{w:g} t) kl_sum(0)"),
        Check("kl_rate", prefix, kl_fit.fitted_rate >= RATE_FRACTION * w, kl_fit.fitted_rate, RATE_FRACTION * w),
        Check("ni_envelope", prefix, _worst_ratio(ly.ni, ni_env) <= 1.0, _worst_ratio(ly.ni, ni_env), 1.0,
              f"C_sigma={c_sigma:.6g}"),
        Check("ni_rate", prefix, ni_fit.fitted_rate >= RATE_FRACTION * w / 2, ni_fit.fitted_rate, RATE_FRACTION * w / 2),
        Check("ratio_envelopes", prefix, not traj.violations, float(len(traj.violations)), 0.0,
              traj.violations[0] if traj.violations else ""),
        Check("gronwall", prefix, not gron, float(len(gron)), 0.0),
        Check("mass_drift", prefix, traj.max_mass_drift <= drift_limit, traj.max_mass_drift, drift_limit),
    ]
    metrics = {"kl_rate": kl_fit.fitted_rate, "kl_rate_r2": kl_fit.r_squared, "ni_rate": ni_fit.fitted_rate,
               "ni_rate_r2": ni_fit.r_squared, "c_sigma": c_sigma, "kl_sum_0": float(kl0),
               "target_kl_rate": w, "target_ni_rate": w / 2}
    return FlowReport(checks, metrics)


def envelope_check(traj: Trajectory, name: str) -> Check:
    return Check(name, "flow", not traj.violations, float(len(traj.violations)), 0.0,
                 traj.violations[0] if traj.violations else "")


# --- mda checks ------------------------------------------------------------------------

def mda_checks(series: MdaSeries, obj: RegularizedObjective, cfg: MdaConfig, prefix="mda") -> FlowReport:
    checks, metrics = [], {}
    n = series.n.astype(float)
    w = obj.reg_weight
    if w == 0 and not np.all(np.isnan(series.column("phi_integral_mu"))):
        lo, hi = PHI_WINDOW
        sel = (n >= lo) & (n <= hi)
        scaled = 2.0 * cfg.eta * n[sel] * series.column("phi_integral_mu")[sel]
        if scaled.size:
            ok = bool(np.all((scaled >= PHI_BAND[0]) & (scaled <= PHI_BAND[1])))
            checks.append(Check("phi_band_min", prefix, ok, float(scaled.min()), PHI_BAND[0],
                                f"2 eta n int phi dmu in [{PHI_BAND[0]}, {PHI_BAND[1]}]"))
            checks.append(Check("phi_band_max", prefix, ok, float(scaled.max()), PHI_BAND[1]))
            metrics["phi_scaled_min"], metrics["phi_scaled_max"] = float(scaled.min()), float(scaled.max())
    if w > 0:
        kl = series.column("kl_sum_to_mne")
        ni = series.column("ni_error")
        kl_env = KL_MARGIN * np.exp(-w * cfg.eta * n) * kl[0]
        ni_env = NI_MARGIN * 2.0 * series.c_sigma * np.exp(-0.5 * w * cfg.eta * n) * np.sqrt(kl[0])
        checks.append(Check("kl_envelope", prefix, _worst_ratio(kl, kl_env) <= 1.0, _worst_ratio(kl, kl_env), 1.0))
        checks.append(Check("ni_envelope", prefix, _worst_ratio(ni, ni_env) <= 1.0, _worst_ratio(ni, ni_env), 1.0,
                            f"C_sigma={series.c_sigma:.6g}"))
        metrics["c_sigma"] = series.c_sigma
        metrics["kl_sum_0"] = float(kl[0])
    limit = 10.0 * cfg.eta ** 2
    checks.append(Check("mass_drift", prefix, series.max_mass_drift <= limit, series.max_mass_drift, limit))
    return FlowReport(checks, metrics)


# --- equilibrium checks ------------------------------------------------------------------

def mne_checks(eq: EquilibriumResult, obj: RegularizedObjective, n_probes=1000, seed=0, prefix="equilibrium"):
    audit = saddle_audit(eq, obj, n_probes, seed)
    ni = ni_error(eq.nu_star, eq.mu_star, obj)
    return [
        Check("residual", prefix, eq.converged and eq.residual_tv <= MNE_RESIDUAL_TOL, eq.residual_tv, MNE_RESIDUAL_TOL),
        Check("saddle_audit", prefix, audit.worst_slack >= SADDLE_TOL, audit.worst_slack, SADDLE_TOL,
              f"{n_probes} probes"),
        Check("ni_at_mne", prefix, ni <= NI_AT_MNE_TOL, ni, NI_AT_MNE_TOL),
    ]


def negative_control(eq: EquilibriumResult, obj: RegularizedObjective, n_probes=100, seed=0, shift=0.3):
    """Perturb nu* away from equilibrium; the audit must report a violation."""
    x = eq.nu_star.grid.points[:, 0]
    bump = shift * np.cos(2 * np.pi * (x - x.min()) / max(np.ptp(x), 1.0) + 0.7)
    bad_nu = gibbs_normalize(eq.nu_star.log_density + bump, eq.nu_star.grid)[0]
    audit = saddle_audit((bad_nu, eq.mu_star), obj, n_probes, seed)
    return Check("negative_control", "equilibrium", audit.worst_slack < SADDLE_TOL, audit.worst_slack, SADDLE_TOL,
                 "perturbed pair must violate the saddle inequality")


# --- property suites -------------------------------------------------------------------

def strong_convexity_slacks(obj: RegularizedObjective, n_tuples=1000, seed=0):
    """Worst slacks of the relative strong convexity / concavity inequalities.

        V(nu', mu) - V(nu, mu) - int a d(nu' - nu) - w KL(nu'|nu) >= 0
        V(nu, mu) - V(nu, mu') + int b d(mu' - mu) - w KL(mu'|mu) >= 0
    """
    rng = named_rng(seed, "strong_convexity")
    gx, gy = obj.payoff.grid_x, obj.payoff.grid_y
    w = obj.reg_weight
    worst_nu = worst_mu = np.inf
    for _ in range(n_tuples):
        nu, nu2 = _random_gibbs(gx, rng), _random_gibbs(gx, rng)
        mu, mu2 = _random_gibbs(gy, rng), _random_gibbs(gy, rng)
        v = eval_v_sigma(obj, nu, mu)
        a = drift_a(obj, nu, mu)
        b = drift_b(obj, nu, mu)
        s_nu = eval_v_sigma(obj, nu2, mu) - v - float(a @ (nu2.masses - nu.masses)) - w * kl_divergence(nu2, nu)
        s_mu = v - eval_v_sigma(obj, nu, mu2) + float(b @ (mu2.masses - mu.masses)) - w * kl_divergence(mu2, mu)
        worst_nu, worst_mu = min(worst_nu, s_nu), min(worst_mu, s_mu)
    return float(worst_nu), float(worst_mu)


def pinsker_worst(n_pairs=1000, seed=0, grid=None):
    """max over random pairs of tv^2 - kl / 2 (must be <= 0)."""
    rng = named_rng(seed, "pinsker")
    grid = grid or Grid.uniform(0.0, 1.0, 64)
    worst = -np.inf
    for _ in range(n_pairs):
        p, q = _random_gibbs(grid, rng), _random_gibbs(grid, rng)
        worst = max(worst, tv_distance(p, q) ** 2 - 0.5 * kl_divergence(p, q))
    return float(worst)


FD_ROUNDING = 1e-8
# rounding in F(mix) - F is ~ 1e-16 |F| / (eps |lin|); a genuine nonlinearity
# shows up at ~1e-4 relative for eps = 1e-4
AFFINE_FD_TOL = 1e-6


def composite_baseline(grid: Grid):
    # a non-uniform baseline makes the penalty profile vary in y; with a
    # uniform one on a periodic grid the outer term is constant in mu
    return reference_from_potential(grid, quadratic_potential(grid, 60.0, 0.3)).measure


@dataclass(frozen=True)
class FDReport:
    linear_ok: bool  # errors shrink at least linearly in eps, down to FD_ROUNDING
    slope_ratio: float  # err(eps0) / err(eps1) on the probe with the largest error
    affine_worst: float  # worst error in the affine (nu) slot
    worst_mu: float


def composite_fd_check(seed=0, n=48, outer="tanh", n_probes=10) -> FDReport:
    g = Grid.uniform(0.0, 1.0, n)
    p = wgan_sin(g, g, lam=1.0, t=0.5, outer=outer, baseline=composite_baseline(g))
    rng = named_rng(seed, "fd_check")
    linear_ok = True
    affine_worst = 0.0
    best = None
    for _ in range(n_probes):
        nu, mu, probe_x, probe_y = (_random_gibbs(g, rng) for _ in range(4))
        affine_worst = max(affine_worst, check_flat_derivative_fd(p, nu, mu, probe_x, "nu").worst)
        fd = check_flat_derivative_fd(p, nu, mu, probe_y, "mu")
        e, eps = np.array(fd.errors), np.array(fd.eps)
        linear_ok &= bool(np.all(e <= 2.0 * (eps / eps[0]) * e[0] + FD_ROUNDING))
        if best is None or e[0] > best[0]:
            best = e
    return FDReport(linear_ok, float(best[0] / best[1]), float(affine_worst), float(best[0]))


# --- the full battery ------------------------------------------------------------------

def run_suite(seed: int = 0, determinism_runner=None) -> list:
    """Run every validation check.  ``determinism_runner`` (optional) is a
    zero-argument callable returning True when two identical runs produced
    byte-identical output."""
    checks = []
    t0 = time.perf_counter()

    # KL / NI decay on the smooth sine game
    obj, nu0, mu0 = smooth_sin_setup()
    eq = solve_mne(obj)
    traj = integrate(nu0, mu0, obj, IntegratorConfig("euler_log", 1e-3, 20.0, 100))
    checks += flow_checks(traj, obj, eq, "flow.smooth_sin").checks

    # matching pennies, sigma = 1, both schemes
    mp, a0, b0 = matching_pennies_setup(1.0)
    mp_eq = solve_mne(mp)
    for scheme in ("euler_log", "exp_duhamel"):
        tr = integrate(a0, b0, mp, IntegratorConfig(scheme, 1e-3, 20.0, 100))
        checks += flow_checks(tr, mp, mp_eq, f"flow.matching_pennies.{scheme}").checks

    # discrete-time rates on the clipped quadratic potential
    ad0, u0, v0 = appendix_d_setup(0.0)
    cfg = MdaConfig(0.1, 5000, 10)
    checks += mda_checks(run_mda(u0, v0, ad0, cfg), ad0, cfg, "mda.sigma0").checks
    ad, u1, v1 = appendix_d_setup(0.5)
    checks += mda_checks(run_mda(u1, v1, ad, cfg), ad, cfg, "mda.sigma0_5").checks

    # Picard fixed point against the ODE
    pobj, p0, q0 = smooth_sin_setup(64)
    pr = picard_solve(p0, q0, pobj, 1.0, 201)
    ode = integrate(p0, q0, pobj, IntegratorConfig("euler_log", 1e-4, 1.0, 50))
    dist = path_tv_distance(pr.trajectory, ode)
    checks.append(Check("picard_vs_ode", "flow", dist <= 1e-4, dist, 1e-4))
    checks.append(picard_geometric_check(pr.distances))
    checks.append(envelope_check(pr.trajectory, "picard_envelopes"))
    checks.append(envelope_check(ode, "ode_envelopes"))
    drift = 10.0 * ode.dt ** 2
    checks.append(Check("mass_drift_fine", "flow", ode.max_mass_drift <= drift, ode.max_mass_drift, drift))

    # equilibria
    checks += mne_checks(mp_eq, mp, 1000, seed, "equilibrium.matching_pennies")
    checks += mne_checks(eq, obj, 1000, seed, "equilibrium.smooth_sin")
    checks.append(negative_control(eq, obj, 100, seed))

    # payoff properties
    fd = composite_fd_check(seed)
    checks.append(Check("composite_fd_linear", "payoff", fd.linear_ok, float(fd.linear_ok), 1.0,
                        "err(eps) <= 2 (eps / eps0) err(eps0) + rounding"))
    checks.append(Check("composite_fd_slope", "payoff", 5.0 <= fd.slope_ratio <= 20.0, fd.slope_ratio, 10.0,
                        "err(1e-4) / err(1e-5) in [5, 20]"))
    checks.append(Check("composite_fd_affine_slot", "payoff", fd.affine_worst <= AFFINE_FD_TOL,
                        fd.affine_worst, AFFINE_FD_TOL))
    for name, o in (("smooth_sin", smooth_sin_setup(32)[0]), ("composite", composite_objective())):
        s_nu, s_mu = strong_convexity_slacks(o, 1000, seed)
        checks.append(Check(f"strong_convexity_nu.{name}", "payoff", s_nu >= CONVEXITY_TOL, s_nu, CONVEXITY_TOL))
        checks.append(Check(f"strong_convexity_mu.{name}", "payoff", s_mu >= CONVEXITY_TOL, s_mu, CONVEXITY_TOL))
    pw = pinsker_worst(1000, seed)
    checks.append(Check("pinsker", "measure", pw <= 0.0, pw, 0.0, "max tv^2 - kl/2"))

    if determinism_runner is not None:
        same = bool(determinism_runner())
        checks.append(Check("determinism", "cli", same, float(same), 1.0, "byte-identical reruns"))
    log.info("validation suite finished in %.1f s", time.perf_counter() - t0)
    return checks


def composite_objective(n=32, sigma=1.0, outer="tanh"):
    g = Grid.uniform(0.0, 1.0, n)
    u = reference_from_potential(g, np.zeros(n))
    return RegularizedObjective.main_text(wgan_sin(g, g, outer=outer, baseline=composite_baseline(g)), sigma, u, u)


def picard_geometric_check(distances, burn_in=3) -> Check:
    """Successive-iterate distances after ``burn_in`` shrink by a ratio bounded below one."""
    d = np.asarray(distances, dtype=float)
    tail = d[burn_in - 1:]
    tail = tail[tail > 1e-14]
    if tail.size < 3:
        return Check("picard_geometric", "flow", False, float("nan"), 1.0, "too few iterations to judge")
    ratios = tail[1:] / tail[:-1]
    worst = float(ratios.max())
    return Check("picard_geometric", "flow", worst < 1.0, worst, 1.0, "max successive distance ratio")
