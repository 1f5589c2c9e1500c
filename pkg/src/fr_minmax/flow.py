"""Time integration of the Fisher-Rao (birth-death) min-max flow.

    d/dt nu_t =  -a(nu_t, mu_t) nu_t,     d/dt mu_t = b(nu_t, mu_t) mu_t

Densities are advanced in the log domain and renormalized after every step,
so positivity is exact and mass errors stay at rounding level.  Two one-step
schemes are provided (log-domain explicit Euler and a Duhamel exponential
step that integrates the linear log-confinement exactly), plus the Picard
construction on a fixed time mesh.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .measure import (
    GridMeasure,
    density_ratio_bounds,
    gibbs_normalize,
    kl_divergence,
    tv_distance,
    write_measure_csv,
    reference_from_potential,
)
from .payoff import Bilinear, RegularizedObjective, drift_a, drift_b

log = logging.getLogger(__name__)

SCHEMES = ("euler_log", "exp_duhamel")
TRAJECTORY_COLUMNS = ("t", "kl_nu_pi", "kl_mu_rho", "sup_ratio_nu", "inf_ratio_nu",
                      "sup_ratio_mu", "inf_ratio_mu", "mass_err_nu", "mass_err_mu")
ENVELOPE_MARGIN = 1.05


class RatioPreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class FlowState:
    t: float
    nu: GridMeasure
    mu: GridMeasure


@dataclass(frozen=True)
class IntegratorConfig:
    scheme: str = "euler_log"
    dt: float = 1e-3
    T: float = 20.0
    sample_every: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if not (self.dt > 0 and self.T > 0):
            raise ValueError("dt and T must be positive")
        if self.dt > self.T:
            raise ValueError("dt must not exceed T")
        if int(self.sample_every) < 1:
            raise ValueError("sample_every must be a positive integer")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @classmethod
    def default(cls, sigma: float, scheme="euler_log", dt=1e-3, max_samples=2000):
        T = 20.0 / sigma ** 2
        n = int(round(T / dt))
        return cls(scheme, dt, T, max(1, -(-n // max_samples)))


def stability_limit(obj: RegularizedObjective) -> float:
    """Largest admissible dt: 0.5 * min(1 / sigma^2, 1 / (C_nu + C_mu + 1))."""
    b = obj.bounds()
    sigma_sq = 2.0 * obj.reg_weight
    inv = 1.0 / sigma_sq if sigma_sq > 0 else np.inf
    return 0.5 * min(inv, 1.0 / (b.c_nu + b.c_mu + 1.0))


# --- a priori envelopes along the flow ---------------------------------------

@dataclass(frozen=True)
class Envelope:
    """Ratio constants of the initial condition and the propagated bounds."""

    r_nu: float
    R_nu: float
    r_mu: float
    R_mu: float
    c_nu: float
    c_mu: float
    reg_weight: float

    def _side(self, side):
        return (self.r_nu, self.R_nu, self.c_nu) if side == "nu" else (self.r_mu, self.R_mu, self.c_mu)

    def kl_bound(self, side) -> float:
        # 2 log R + (4 / sigma^2) C  with  sigma^2 = 2 w
        _, R, C = self._side(side)
        return 2.0 * np.log(R) + 2.0 * C / self.reg_weight

    def R1(self, side) -> float:
        # 1 + exp(3 log R + (6 / sigma^2) C)
        _, R, C = self._side(side)
        return 1.0 + float(np.exp(min(3.0 * np.log(R) + 3.0 * C / self.reg_weight, 700.0)))

    def r1(self, side) -> float:
        # mirror of the upper bound: log ratio >= min(log r, 0) - (2 / sigma^2) C
        r, _, C = self._side(side)
        return float(np.exp(min(np.log(r), 0.0) - C / self.reg_weight))

    def cv(self, side) -> float:
        # 3 C + (sigma^2 / 2)(max(|log r1|, log R1) + 2 log R)
        _, R, C = self._side(side)
        spread = max(abs(np.log(self.r1(side))), np.log(self.R1(side)))
        return 3.0 * C + self.reg_weight * (spread + 2.0 * np.log(R))

    def as_dict(self) -> dict:
        d = dict(r_nu=self.r_nu, R_nu=self.R_nu, r_mu=self.r_mu, R_mu=self.R_mu,
                 c_nu=self.c_nu, c_mu=self.c_mu)
        if self.reg_weight > 0:
            d.update(kl_bound_nu=self.kl_bound("nu"), kl_bound_mu=self.kl_bound("mu"),
                     R1_nu=self.R1("nu"), R1_mu=self.R1("mu"),
                     r1_nu=self.r1("nu"), r1_mu=self.r1("mu"),
                     cv_nu=self.cv("nu"), cv_mu=self.cv("mu"))
        return {k: float(v) for k, v in d.items()}


def ratio_envelope(obj: RegularizedObjective, nu0: GridMeasure, mu0: GridMeasure,
                   max_log_ratio: float = 700.0) -> Envelope:
    """Check the warm-start ratio condition and return the (r, R) constants.

    On a grid both ratios are automatically positive and finite; the check
    fails only when a log ratio is beyond ``max_log_ratio`` in magnitude.
    """
    out = {}
    for side, m, ref in (("nu", nu0, obj.pi.measure), ("mu", mu0, obj.rho.measure)):
        try:
            lo, hi = density_ratio_bounds(m, ref)
        except ValueError as exc:
            raise RatioPreconditionError(f"ratio condition failed for {side}: {exc}") from exc
        lr = m.log_density - ref.log_density
        if not (np.all(np.isfinite(lr)) and np.max(np.abs(lr)) <= max_log_ratio and lo > 0):
            raise RatioPreconditionError(
                f"ratio condition failed for {side}: {side}0 / reference spans "
                f"[{lo:.3g}, {hi:.3g}] beyond the admissible range")
        # the bounds need R > 1; an initial condition equal to the reference gives R = 1
        out[side] = (lo, max(hi, 1.0 + 1e-12))
    b = obj.bounds()
    return Envelope(out["nu"][0], out["nu"][1], out["mu"][0], out["mu"][1], b.c_nu, b.c_mu, obj.reg_weight)


# --- single steps ----------------------------------------------------------------

def _euler(state, obj, dt):
    a = drift_a(obj, state.nu, state.mu)
    b = drift_b(obj, state.nu, state.mu)
    nu, lz_nu = gibbs_normalize(state.nu.log_density - dt * a, state.nu.grid)
    mu, lz_mu = gibbs_normalize(state.mu.log_density + dt * b, state.mu.grid)
    return FlowState(state.t + dt, nu, mu), lz_nu, lz_mu


def _duhamel(state, obj, dt):
    obj.require_positive()
    w = obj.reg_weight
    decay = np.exp(-w * dt)
    nu, mu = state.nu, state.mu
    p = obj.payoff
    # log nu <- e^{-w dt} log nu + (1 - e^{-w dt}) (log pi + KL(nu|pi) - dF/dnu / w)
    g_nu = obj.pi.log_density + kl_divergence(nu, obj.pi.measure) - nu.center(p.dnu_raw(nu, mu)) / w
    g_mu = obj.rho.log_density + kl_divergence(mu, obj.rho.measure) + mu.center(p.dmu_raw(nu, mu)) / w
    nu_new, lz_nu = gibbs_normalize(decay * nu.log_density + (1 - decay) * g_nu, nu.grid)
    mu_new, lz_mu = gibbs_normalize(decay * mu.log_density + (1 - decay) * g_mu, mu.grid)
    return FlowState(state.t + dt, nu_new, mu_new), lz_nu, lz_mu


def _replicator(state, obj, dt):
    # sigma = 0: drifts reduce to centered payoffs
    p = obj.payoff
    a = state.nu.center(p.dnu_raw(state.nu, state.mu))
    b = state.mu.center(p.dmu_raw(state.nu, state.mu))
    nu, lz_nu = gibbs_normalize(state.nu.log_density - dt * a, state.nu.grid)
    mu, lz_mu = gibbs_normalize(state.mu.log_density + dt * b, state.mu.grid)
    return FlowState(state.t + dt, nu, mu), lz_nu, lz_mu


_STEPPERS = {"euler_log": _euler, "exp_duhamel": _duhamel, "replicator": _replicator}


def _step(kind, state, obj, dt):
    try:
        return _STEPPERS[kind](state, obj, dt)
    except ValueError as exc:
        if "non-finite" in str(exc):
            raise FloatingPointError(f"non-finite drift at t={state.t:g}: check the payoff ({exc})") from exc
        raise


def step_euler_log(state: FlowState, obj: RegularizedObjective, dt: float) -> FlowState:
    """log nu -= dt a,  log mu += dt b, simultaneous, then renormalize."""
    obj.require_positive()
    if not dt * obj.reg_weight < 1.0:
        raise ValueError(f"dt = {dt} violates the stability guard dt * sigma^2 / 2 < 1")
    return _step("euler_log", state, obj, dt)[0]


def step_exp_duhamel(state: FlowState, obj: RegularizedObjective, dt: float) -> FlowState:
    """Exponential step: exact in the log-confinement, frozen payoff term."""
    obj.require_positive()
    return _step("exp_duhamel", state, obj, dt)[0]


# --- trajectories ------------------------------------------------------------------

@dataclass
class Trajectory:
    times: np.ndarray
    states: list
    diagnostics: dict
    envelope: Envelope | None = None
    violations: list = field(default_factory=list)
    max_mass_drift: float = 0.0
    dt: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.states)

    @property
    def final(self) -> FlowState:
        return self.states[-1]

    def column(self, name) -> np.ndarray:
        return self.diagnostics[name]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJECTORY_COLUMNS)
            cols = [self.times] + [self.diagnostics[c] for c in TRAJECTORY_COLUMNS[1:]]
            for row in zip(*cols):
                w.writerow([format(float(v), ".17g") for v in row])

    def write_snapshots(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for k, s in enumerate(self.states):
            write_measure_csv(d / f"nu_{k:05d}.csv", s.nu)
            write_measure_csv(d / f"mu_{k:05d}.csv", s.mu)


def _diagnose(state, obj):
    lo_n, hi_n = density_ratio_bounds(state.nu, obj.pi.measure)
    lo_m, hi_m = density_ratio_bounds(state.mu, obj.rho.measure)
    return (state.t, kl_divergence(state.nu, obj.pi.measure), kl_divergence(state.mu, obj.rho.measure),
            hi_n, lo_n, hi_m, lo_m, abs(state.nu.mass - 1.0), abs(state.mu.mass - 1.0))


def _check_envelope(row, env: Envelope, violations: list):
    t, kl_n, kl_m, hi_n, lo_n, hi_m, lo_m = row[:7]
    checks = (
        ("nu", "KL(nu_t|pi)", kl_n <= ENVELOPE_MARGIN * env.kl_bound("nu")),
        ("mu", "KL(mu_t|rho)", kl_m <= ENVELOPE_MARGIN * env.kl_bound("mu")),
        ("nu", "sup nu_t/pi", hi_n <= ENVELOPE_MARGIN * env.R1("nu")),
        ("mu", "sup mu_t/rho", hi_m <= ENVELOPE_MARGIN * env.R1("mu")),
        ("nu", "inf nu_t/pi", lo_n * ENVELOPE_MARGIN >= env.r1("nu")),
        ("mu", "inf mu_t/rho", lo_m * ENVELOPE_MARGIN >= env.r1("mu")),
    )
    for side, what, ok in checks:
        if not ok:
            violations.append(f"t={t:.6g}: {what} outside envelope")


def _build(samples, obj, env, max_drift, dt, meta, check_env=True):
    rows = [_diagnose(s, obj) for s in samples]
    violations = []
    if env is not None and check_env:
        for r in rows:
            _check_envelope(r, env, violations)
    arr = np.array(rows, dtype=float)
    diags = {name: arr[:, i] for i, name in enumerate(TRAJECTORY_COLUMNS)}
    if violations:
        log.warning("%d envelope violations (first: %s)", len(violations), violations[0])
    return Trajectory(arr[:, 0].copy(), list(samples), diags, env, violations, max_drift, dt, meta)


def _run(kind, nu0, mu0, obj, cfg: IntegratorConfig, env):
    state = FlowState(0.0, nu0, mu0)
    samples = [state]
    max_drift = 0.0
    n = cfg.n_steps
    for k in range(1, n + 1):
        state, lz_n, lz_m = _step(kind, state, obj, cfg.dt)
        state = FlowState(k * cfg.dt, state.nu, state.mu)
        max_drift = max(max_drift, abs(np.expm1(lz_n)), abs(np.expm1(lz_m)))
        if k % cfg.sample_every == 0 or k == n:
            samples.append(state)
    meta = {"scheme": kind, "dt": cfg.dt, "T": cfg.T, "n_steps": n, "reg_weight": obj.reg_weight,
            "convention": obj.convention}
    return _build(samples, obj, env, max_drift, cfg.dt, meta)


def integrate(nu0: GridMeasure, mu0: GridMeasure, obj: RegularizedObjective,
              cfg: IntegratorConfig) -> Trajectory:
    """Integrate the flow on [0, T], recording diagnostics every ``sample_every`` steps.

    The warm-start ratio condition is checked at t = 0 (hard error); bounds
    propagated along the flow are checked per sample and reported as
    violations without aborting.
    """
    obj.require_positive()
    env = ratio_envelope(obj, nu0, mu0)
    limit = stability_limit(obj)
    if cfg.dt > limit:
        raise ValueError(f"dt = {cfg.dt} exceeds the stability limit {limit:.4g}")
    return _run(cfg.scheme, nu0, mu0, obj, cfg, env)


def replicator_trajectory(payoff: Bilinear, nu0: GridMeasure, mu0: GridMeasure, sigma: float,
                          cfg: IntegratorConfig, pi=None, rho=None) -> Trajectory:
    """Two-population replicator dynamics on finite strategy sets.

    With sigma = 0 this is the classical zero-sum replicator flow; with
    sigma > 0 it is the regularized flow against uniform (or given)
    references.
    """
    for g in (payoff.grid_x, payoff.grid_y):
        if not np.all(g.weights == 1.0):
            raise ValueError("replicator dynamics need finite strategy sets (unit weights)")
    if not np.all(np.isfinite(payoff.linear_kernel())):
        raise ValueError("non-finite payoff")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    pi = pi or reference_from_potential(payoff.grid_x, np.zeros(payoff.grid_x.size))
    rho = rho or reference_from_potential(payoff.grid_y, np.zeros(payoff.grid_y.size))
    if sigma > 0:
        return integrate(nu0, mu0, RegularizedObjective.main_text(payoff, sigma, pi, rho), cfg)
    obj = RegularizedObjective(payoff, pi, rho, 0.0, 0.0, "main_text")
    return _run("replicator", nu0, mu0, obj, cfg, None)


# --- Picard iteration -------------------------------------------------------------

@dataclass
class PicardResult:
    trajectory: Trajectory
    distances: list
    converged: bool
    iterations: int


def _path_tv(times, A, B, grid):
    # int_0^T TV(A_t, B_t) dt by the trapezoidal rule; rows are log densities
    w = grid.weights
    tv = 0.5 * np.sum(np.abs(np.exp(A) - np.exp(B)) * w, axis=1)
    return float(np.trapezoid(tv, times)) if hasattr(np, "trapezoid") else float(np.trapz(tv, times))


def _normalize_rows(L, grid):
    lw = L + grid.log_weights[None, :]
    m = lw.max(axis=1, keepdims=True)
    lz = m + np.log(np.sum(np.exp(lw - m), axis=1, keepdims=True))
    return L - lz


def _duhamel_integral(G, times, w):
    # I_j = int_0^{t_j} w e^{-w (t_j - s)} G(s) ds, trapezoidal on the mesh
    I = np.zeros_like(G)
    for j in range(1, len(times)):
        h = times[j] - times[j - 1]
        e = np.exp(-w * h)
        I[j] = e * I[j - 1] + 0.5 * h * w * (e * G[j - 1] + G[j])
    return I


def picard_solve(nu0: GridMeasure, mu0: GridMeasure, obj: RegularizedObjective, T: float,
                 n_time_nodes: int, tol: float = 1e-12, max_iters: int = 200) -> PicardResult:
    """Fixed point of the Duhamel map on a uniform time mesh.

    Starting from the constant path (nu0, mu0), each sweep recomputes

        log nu_t = e^{-wt} log nu0 - int_0^t w e^{-w(t-s)} (dF/dnu(s) / w - log pi - KL(nu_s|pi)) ds

    (and the mirrored formula for mu) from the previous iterate, with the
    time integral done by the trapezoidal rule.  Iterates are renormalized
    on each node.  Stops once the path-TV distance between successive
    iterates drops to ``tol``.
    """
    obj.require_positive()
    if n_time_nodes < 2:
        raise ValueError("need at least two time nodes")
    env = ratio_envelope(obj, nu0, mu0)
    w = obj.reg_weight
    p = obj.payoff
    gx, gy = nu0.grid, mu0.grid
    times = np.linspace(0.0, T, n_time_nodes)
    decay = np.exp(-w * times)[:, None]
    LN = np.tile(nu0.log_density, (n_time_nodes, 1))
    LM = np.tile(mu0.log_density, (n_time_nodes, 1))
    lpi, lrho = obj.pi.log_density, obj.rho.log_density
    distances = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        GN = np.empty_like(LN)
        GM = np.empty_like(LM)
        for j in range(n_time_nodes):
            nu = GridMeasure(gx, LN[j])
            mu = GridMeasure(gy, LM[j])
            GN[j] = nu.center(p.dnu_raw(nu, mu)) / w - lpi - kl_divergence(nu, obj.pi.measure)
            GM[j] = mu.center(p.dmu_raw(nu, mu)) / w + lrho + kl_divergence(mu, obj.rho.measure)
        LN_new = _normalize_rows(decay * nu0.log_density - _duhamel_integral(GN, times, w), gx)
        LM_new = _normalize_rows(decay * mu0.log_density + _duhamel_integral(GM, times, w), gy)
        d = _path_tv(times, LN_new, LN, gx) + _path_tv(times, LM_new, LM, gy)
        distances.append(d)
        LN, LM = LN_new, LM_new
        log.debug("picard iteration %d: path TV %.3e", it, d)
        if d <= tol:
            converged = True
            break
    if not converged:
        log.warning("picard iteration did not reach tol=%g in %d sweeps (last %.3e)", tol, max_iters, distances[-1])
    states = [FlowState(float(t), GridMeasure(gx, LN[j]), GridMeasure(gy, LM[j])) for j, t in enumerate(times)]
    meta = {"scheme": "picard", "T": T, "n_time_nodes": n_time_nodes, "iterations": it,
            "converged": converged, "reg_weight": w, "convention": obj.convention}
    traj = _build(states, obj, env, 0.0, float(times[1] - times[0]), meta)
    return PicardResult(traj, distances, converged, it)


def path_tv_distance(a: Trajectory, b: Trajectory) -> float:
    """int_0^T TV(nu_t, nu'_t) dt + int_0^T TV(mu_t, mu'_t) dt on matching sample times."""
    if len(a.times) != len(b.times) or not np.allclose(a.times, b.times, rtol=0, atol=1e-9):
        raise ValueError("trajectories are sampled at different times")
    tv = np.array([tv_distance(s.nu, r.nu) + tv_distance(s.mu, r.mu) for s, r in zip(a.states, b.states)])
    return float(np.sum(0.5 * (tv[1:] + tv[:-1]) * np.diff(a.times)))
