import itertools

import numpy as np
import pytest

from fr_minmax.equilibrium import solve_mne
from fr_minmax.flow import FlowState, step_exp_duhamel
from fr_minmax.games import appendix_d_phi, smooth_sin
from fr_minmax.mda import MDA_COLUMNS, MdaConfig, mda_step, run_mda
from fr_minmax.measure import Grid, gibbs_normalize, kl_divergence, tv_distance
from fr_minmax.payoff import Bilinear, RegularizedObjective
from fr_minmax.validation import appendix_d_setup

from conftest import measure_from, random_measure, uniform_ref


def _sin_obj(n=32, sigma=1.0):
    g = Grid.uniform(0.0, 1.0, n)
    u = uniform_ref(g)
    return RegularizedObjective.main_text(smooth_sin(g, g), sigma, u, u), g


def test_step_matches_flow_to_second_order(rng):
    obj, g = _sin_obj()
    nu0, mu0 = random_measure(g, rng), random_measure(g, rng)
    errs = []
    etas = (1e-2, 1e-3, 1e-4)
    for eta in etas:
        nu, mu = mda_step(nu0, mu0, obj, MdaConfig(eta=eta))
        s = FlowState(0.0, nu0, mu0)
        for _ in range(200):
            s = step_exp_duhamel(s, obj, eta / 200)
        errs.append(tv_distance(nu, s.nu) + tv_distance(mu, s.mu))
    for (a, ea), (b, eb) in zip(zip(etas, errs), zip(etas[1:], errs[1:])):
        assert ea / eb == pytest.approx((a / b) ** 2, rel=0.1)


def test_separable_unregularized_closed_form():
    obj, nu0, mu0 = appendix_d_setup(sigma=0.0, n=201)
    eta, n = 0.1, 50
    nu, mu = nu0, mu0
    for _ in range(n):
        nu, mu = mda_step(nu, mu, obj, MdaConfig(eta=eta))
    phi = obj.payoff.phi_y
    expect = gibbs_normalize(mu0.log_density - n * eta * phi, mu0.grid)[0]
    assert np.allclose(mu.log_density, expect.log_density, atol=1e-10)
    expect_nu = gibbs_normalize(nu0.log_density - n * eta * obj.payoff.phi_x, nu0.grid)[0]
    assert np.allclose(nu.log_density, expect_nu.log_density, atol=1e-10)


def test_mne_is_fixed_point():
    obj, g = _sin_obj()
    eq = solve_mne(obj)
    nu, mu = mda_step(eq.nu_star, eq.mu_star, obj, MdaConfig(eta=0.5))
    assert tv_distance(nu, eq.nu_star) + tv_distance(mu, eq.mu_star) <= 1e-10


def test_multiplicative_weights_is_proximal_argmin():
    g = Grid.finite(3)
    K = np.array([[0.3, -1.0, 0.5], [1.2, 0.0, -0.4], [-0.7, 0.8, 0.1]])
    u = uniform_ref(g)
    obj = RegularizedObjective.main_text(Bilinear(K, g, g), 0.0, u, u)
    nu0 = measure_from(g, [0.5, 0.3, 0.2])
    mu0 = measure_from(g, [0.2, 0.2, 0.6])
    eta = 0.7
    nu1, mu1 = mda_step(nu0, mu0, obj, MdaConfig(eta=eta))
    h = K @ mu0.masses
    gy = nu0.masses @ K
    step = 1e-3
    best_nu, best_mu = None, None
    vn, vm = np.inf, -np.inf
    p0, q0 = nu0.masses, mu0.masses
    for i, j in itertools.product(range(1, 1000), repeat=2):
        if i + j >= 1000:
            continue
        p = np.array([i, j, 1000 - i - j]) * step
        kl_n = float(np.sum(p * np.log(p / p0)))
        kl_m = float(np.sum(p * np.log(p / q0)))
        a = p @ h + kl_n / eta
        b = p @ gy - kl_m / eta
        if a < vn:
            vn, best_nu = a, p
        if b > vm:
            vm, best_mu = b, p
    assert np.max(np.abs(best_nu - nu1.masses)) <= 1e-3
    assert np.max(np.abs(best_mu - mu1.masses)) <= 1e-3


def test_regularized_objective_monotone_when_separable(rng):
    g = Grid.uniform(-1.0, 1.0, 64)
    u = uniform_ref(g)
    obj = RegularizedObjective.appendix_d(appendix_d_phi(g, g), 0.5, u, u)
    nu, mu = random_measure(g, rng), random_measure(g, rng)
    cfg = MdaConfig(eta=0.5)

    def sides(nu, mu):
        fn = nu.integrate(obj.payoff.phi_x) + obj.reg_weight * kl_divergence(nu, u.measure)
        fm = -mu.integrate(obj.payoff.phi_y) - obj.reg_weight * kl_divergence(mu, u.measure)
        return fn, fm

    prev = sides(nu, mu)
    for _ in range(100):
        nu, mu = mda_step(nu, mu, obj, cfg)
        cur = sides(nu, mu)
        assert cur[0] <= prev[0] + 1e-14
        assert cur[1] >= prev[1] - 1e-14
        prev = cur


def test_step_size_guard():
    obj, g = _sin_obj(sigma=2.0)  # w = 2
    u = uniform_ref(g).measure
    with pytest.raises(ValueError, match="step too large"):
        mda_step(u, u, obj, MdaConfig(eta=0.6))
    with pytest.raises(ValueError):
        MdaConfig(eta=0.0)
    with pytest.raises(ValueError):
        MdaConfig(n_steps=0)


def test_run_mda_series_and_csv(tmp_path):
    obj, nu0, mu0 = appendix_d_setup(sigma=0.5, n=101)
    nu0 = gibbs_normalize(-2.0 * nu0.grid.points[:, 0], nu0.grid)[0]
    s = run_mda(nu0, mu0, obj, MdaConfig(eta=0.1, n_steps=50, record_every=10))
    assert list(s.n) == [0, 10, 20, 30, 40, 50]
    kl = s.column("kl_sum_to_mne")
    assert np.all(np.diff(kl) < 0)
    assert np.all(np.isfinite(s.column("phi_integral_mu")))
    assert np.all(s.column("mass_err") <= 1e-12)
    assert s.max_mass_drift <= 10 * 0.1 ** 2
    assert s.c_sigma > 0
    s.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == ",".join(MDA_COLUMNS)
    assert len(lines) == 7


def test_run_mda_unregularized_has_no_kl_column():
    obj, nu0, mu0 = appendix_d_setup(sigma=0.0, n=101)
    s = run_mda(nu0, mu0, obj, MdaConfig(eta=0.1, n_steps=20, record_every=5))
    assert s.equilibrium is None
    assert np.all(np.isnan(s.column("kl_sum_to_mne")))
    assert np.all(s.column("ni_error") >= 0)
