import numpy as np
import pytest

from fr_minmax.equilibrium import fit_decay_rate, solve_mne
from fr_minmax.flow import (
    TRAJECTORY_COLUMNS,
    FlowState,
    IntegratorConfig,
    RatioPreconditionError,
    integrate,
    path_tv_distance,
    picard_solve,
    replicator_trajectory,
    stability_limit,
    step_euler_log,
    step_exp_duhamel,
)
from fr_minmax.games import matching_pennies, smooth_sin, zero_kernel
from fr_minmax.mda import MdaConfig, mda_step
from fr_minmax.measure import Grid, GridMeasure, gibbs_normalize, kl_divergence, tv_distance
from fr_minmax.payoff import Bilinear, RegularizedObjective
from fr_minmax.validation import appendix_d_setup, matching_pennies_setup, offset_gaussians

from conftest import measure_from, random_measure, uniform_ref


def _sin_obj(n=32, sigma=1.0):
    g = Grid.uniform(0.0, 1.0, n)
    u = uniform_ref(g)
    return RegularizedObjective.main_text(smooth_sin(g, g), sigma, u, u), g


def _state_tv(a, b):
    return tv_distance(a.nu, b.nu) + tv_distance(a.mu, b.mu)


@pytest.mark.parametrize("step", [step_euler_log, step_exp_duhamel])
def test_mne_is_fixed_point(step):
    obj, _ = _sin_obj()
    eq = solve_mne(obj)
    s = FlowState(0.0, eq.nu_star, eq.mu_star)
    assert _state_tv(step(s, obj, 1e-2), s) <= 1e-10


@pytest.mark.parametrize("scheme", ["euler_log", "exp_duhamel"])
def test_zero_kernel_references_stationary(scheme):
    g = Grid.uniform(0.0, 1.0, 16)
    pi = uniform_ref(g)
    obj = RegularizedObjective.main_text(zero_kernel(g, g), 1.0, pi, pi)
    tr = integrate(pi.measure, pi.measure, obj, IntegratorConfig(scheme, 0.01, 1.0))
    assert _state_tv(tr.final, tr.states[0]) <= 1e-14


def test_euler_local_error_second_order(rng):
    obj, g = _sin_obj()
    s = FlowState(0.0, random_measure(g, rng), random_measure(g, rng))
    errs = []
    for dt in (1e-2, 5e-3, 2.5e-3):
        one = step_euler_log(s, obj, dt)
        two = step_euler_log(step_euler_log(s, obj, dt / 2), obj, dt / 2)
        errs.append(_state_tv(one, two))
    for a, b in zip(errs, errs[1:]):
        assert a / b == pytest.approx(4.0, rel=0.05)


def test_duhamel_exact_decay_on_zero_kernel(rng):
    g = Grid.uniform(0.0, 1.0, 24)
    pi = uniform_ref(g)
    obj = RegularizedObjective.main_text(zero_kernel(g, g), 1.2, pi, pi)
    nu0, mu0 = random_measure(g, rng), random_measure(g, rng)
    dt = 0.3
    out = step_exp_duhamel(FlowState(0.0, nu0, mu0), obj, dt)
    lr0 = nu0.log_density - pi.log_density
    lr1 = out.nu.log_density - pi.log_density
    d0 = lr0 - lr0.mean()
    d1 = lr1 - lr1.mean()
    assert np.allclose(d1, np.exp(-obj.reg_weight * dt) * d0, atol=1e-13)


def test_zero_kernel_converges_to_references(rng):
    g = Grid.uniform(0.0, 1.0, 24)
    pi = uniform_ref(g)
    sigma = 1.0
    obj = RegularizedObjective.main_text(zero_kernel(g, g), sigma, pi, pi)
    nu0, mu0 = random_measure(g, rng), random_measure(g, rng)
    tr = integrate(nu0, mu0, obj, IntegratorConfig("exp_duhamel", 0.01, 40.0 / sigma ** 2, 100))
    assert kl_divergence(tr.final.nu, pi.measure) <= 1e-8
    assert kl_divergence(tr.final.mu, pi.measure) <= 1e-8
    assert not tr.violations


def test_schemes_agree_at_small_dt():
    obj, g = _sin_obj(32)
    nu0, mu0 = offset_gaussians(g)
    cfg_e = IntegratorConfig("euler_log", 1e-5, 0.5, 5000)
    cfg_d = IntegratorConfig("exp_duhamel", 1e-5, 0.5, 5000)
    a = integrate(nu0, mu0, obj, cfg_e)
    b = integrate(nu0, mu0, obj, cfg_d)
    worst = max(_state_tv(x, y) for x, y in zip(a.states, b.states))
    assert worst <= 1e-6


def test_mda_steps_equal_euler_steps():
    obj, nu0, mu0 = appendix_d_setup(sigma=0.5, n=101)
    s = FlowState(0.0, nu0, mu0)
    nu, mu = nu0, mu0
    eta = 1e-2
    for _ in range(20):
        s = step_euler_log(s, obj, eta)
        nu, mu = mda_step(nu, mu, obj, MdaConfig(eta=eta))
    assert tv_distance(s.nu, nu) + tv_distance(s.mu, mu) <= 1e-13


def test_mda_approaches_flow_as_eta_shrinks():
    obj, nu0, mu0 = appendix_d_setup(sigma=0.5, n=101)
    # shift the start away from the stationary point
    nu0 = gibbs_normalize(-3.0 * nu0.grid.points[:, 0], nu0.grid)[0]
    T = 1.0
    ref = integrate(nu0, mu0, obj, IntegratorConfig("exp_duhamel", 1e-4, T, 10000)).final
    errs = []
    for eta in (1e-1, 5e-2, 2.5e-2):
        nu, mu = nu0, mu0
        for _ in range(int(round(T / eta))):
            nu, mu = mda_step(nu, mu, obj, MdaConfig(eta=eta))
        errs.append(tv_distance(nu, ref.nu) + tv_distance(mu, ref.mu))
    assert errs[0] > errs[1] > errs[2]
    assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.2)


def test_matching_pennies_converges_to_uniform():
    obj, nu0, mu0 = matching_pennies_setup(sigma=1.0)
    tr = integrate(nu0, mu0, obj, IntegratorConfig("exp_duhamel", 0.01, 40.0, 100))
    assert np.allclose(tr.final.nu.masses, 0.5, atol=1e-8)
    assert np.allclose(tr.final.mu.masses, 0.5, atol=1e-8)


def test_picard_zero_kernel_immediate(rng):
    g = Grid.uniform(0.0, 1.0, 16)
    pi = uniform_ref(g)
    obj = RegularizedObjective.main_text(zero_kernel(g, g), 1.0, pi, pi)
    res = picard_solve(pi.measure, pi.measure, obj, 2.0, 21)
    assert res.converged and res.iterations <= 2


def test_picard_matches_fine_integration():
    obj, g = _sin_obj(32)
    nu0, mu0 = offset_gaussians(g)
    T, nodes = 1.0, 201
    pic = picard_solve(nu0, mu0, obj, T, nodes)
    assert pic.converged
    dt = 1e-4
    tr = integrate(nu0, mu0, obj, IntegratorConfig("exp_duhamel", dt, T, int(round(T / (nodes - 1) / dt))))
    assert path_tv_distance(pic.trajectory, tr) <= 1e-5


def test_picard_needs_two_nodes():
    obj, g = _sin_obj(8)
    nu0, mu0 = offset_gaussians(g)
    with pytest.raises(ValueError):
        picard_solve(nu0, mu0, obj, 1.0, 1)


def test_replicator_conserves_kl_to_uniform():
    p = matching_pennies()
    nu0 = measure_from(p.grid_x, [0.8, 0.2])
    mu0 = measure_from(p.grid_y, [0.3, 0.7])
    u = GridMeasure(p.grid_x, np.full(2, np.log(0.5)))

    def drift(dt):
        tr = replicator_trajectory(p, nu0, mu0, 0.0, IntegratorConfig("euler_log", dt, 5.0, 100))
        h = [kl_divergence(u, s.nu) + kl_divergence(u, s.mu) for s in tr.states]
        return max(abs(x - h[0]) for x in h)

    d1, d2 = drift(1e-3), drift(5e-4)
    assert d1 < 1e-2
    # the per-step error is quadratic, so the accumulated drift halves with dt
    assert d1 / d2 == pytest.approx(2.0, rel=0.1)


def test_replicator_regularized_rate():
    p = matching_pennies()
    nu0 = measure_from(p.grid_x, [0.8, 0.2])
    mu0 = measure_from(p.grid_y, [0.3, 0.7])
    sigma = 0.5
    tr = replicator_trajectory(p, nu0, mu0, sigma, IntegratorConfig("exp_duhamel", 0.01, 40.0 / sigma ** 2, 10))
    u = GridMeasure(p.grid_x, np.full(2, np.log(0.5)))
    kl = np.array([kl_divergence(u, s.nu) + kl_divergence(u, s.mu) for s in tr.states])
    assert kl[-1] <= 1e-8
    fit = fit_decay_rate(tr.times, kl)
    assert fit.fitted_rate >= 0.95 * sigma ** 2 / 2


def test_replicator_dominant_strategy():
    g = Grid.finite(2)
    # row 0 is strictly better for the minimizer whatever the opponent does
    p = Bilinear(np.array([[0.0, 0.0], [1.0, 1.0]]), g, g)
    nu0 = measure_from(g, [0.5, 0.5])
    tr = replicator_trajectory(p, nu0, nu0, 0.0, IntegratorConfig("euler_log", 0.01, 30.0, 100))
    assert tr.final.nu.masses[0] > 1 - 1e-10


def test_replicator_requires_finite_sets():
    g = Grid.uniform(0.0, 1.0, 4)
    p = zero_kernel(g, g)
    u = uniform_ref(g).measure
    with pytest.raises(ValueError):
        replicator_trajectory(p, u, u, 0.0, IntegratorConfig())


def test_ratio_precondition_names_side():
    obj, g = _sin_obj(16)
    bad = gibbs_normalize(np.where(np.arange(16) == 0, -1000.0, 0.0), g)[0]
    good = uniform_ref(g).measure
    with pytest.raises(RatioPreconditionError, match="mu"):
        integrate(good, bad, obj, IntegratorConfig("euler_log", 1e-2, 0.1))
    with pytest.raises(RatioPreconditionError, match="nu"):
        integrate(bad, good, obj, IntegratorConfig("euler_log", 1e-2, 0.1))


def test_stability_guard():
    obj, g = _sin_obj(16)
    u = uniform_ref(g).measure
    lim = stability_limit(obj)
    with pytest.raises(ValueError, match="stability"):
        integrate(u, u, obj, IntegratorConfig("euler_log", 1.5 * lim, 10.0))
    with pytest.raises(ValueError):
        step_euler_log(FlowState(0.0, u, u), obj, 2.0 / obj.reg_weight)


@pytest.mark.parametrize("kwargs", [dict(scheme="rk4"), dict(dt=0.0), dict(dt=2.0, T=1.0), dict(sample_every=0)])
def test_bad_integrator_config(kwargs):
    with pytest.raises(ValueError):
        IntegratorConfig(**kwargs)


def test_zero_sigma_rejected_by_flow():
    g = Grid.uniform(0.0, 1.0, 8)
    u = uniform_ref(g)
    obj = RegularizedObjective.main_text(smooth_sin(g, g), 0.0, u, u)
    with pytest.raises(ValueError):
        integrate(u.measure, u.measure, obj, IntegratorConfig())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_drift_raises():
    g = Grid.uniform(0.0, 1.0, 4)
    u = uniform_ref(g)
    p = Bilinear(np.zeros((4, 4)), g, g)
    obj = RegularizedObjective.main_text(p, 1.0, u, u)
    # corrupt the kernel after validation
    object.__setattr__(p, "kernel", np.full((4, 4), np.inf))
    with pytest.raises(FloatingPointError):
        step_euler_log(FlowState(0.0, u.measure, u.measure), obj, 0.01)


def test_trajectory_outputs(tmp_path):
    obj, g = _sin_obj(16)
    nu0, mu0 = offset_gaussians(g)
    tr = integrate(nu0, mu0, obj, IntegratorConfig("euler_log", 0.01, 0.5, 10))
    assert len(tr) == 6
    # pre-normalization drift is a local O(dt^2) error; stored measures have unit mass
    assert tr.max_mass_drift <= 10 * 0.01 ** 2
    assert np.all(tr.column("mass_err_nu") <= 1e-12)
    assert np.all(tr.column("mass_err_mu") <= 1e-12)
    tr.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == ",".join(TRAJECTORY_COLUMNS)
    assert len(lines) == 7
    tr.write_snapshots(tmp_path / "snaps")
    assert len(list((tmp_path / "snaps").glob("nu_*.csv"))) == 6
