import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fr_minmax.measure import (
    DENSITY_FLOOR,
    Grid,
    GridMeasure,
    GridMismatchError,
    density_ratio_bounds,
    from_density,
    gibbs_normalize,
    kl_divergence,
    mix,
    read_measure_csv,
    tv_distance,
    uniform_measure,
    write_measure_csv,
)
from conftest import measure_from, random_measure


# grids

def test_uniform_grid_trapezoid_weights():
    g = Grid.uniform(0.0, 1.0, 5)
    assert np.allclose(g.weights, [0.125, 0.25, 0.25, 0.25, 0.125])
    assert g.volume == pytest.approx(1.0)


def test_box_grid_is_product():
    g = Grid.box([(0, 1), (0, 2)], 3)
    assert g.size == 9 and g.dim == 2
    assert g.volume == pytest.approx(2.0)


def test_finite_grid_unit_weights():
    g = Grid.finite(3)
    assert np.all(g.weights == 1.0) and g.is_finite_set


@pytest.mark.parametrize("pts,w", [([0, 1], [1, 0]), ([0, 1], [1, -1]), ([0, 0], [1, 1]), ([0, 1], [1, np.inf])])
def test_grid_rejects_bad_input(pts, w):
    with pytest.raises(ValueError):
        Grid(np.array(pts, float), np.array(w, float))


# gibbs_normalize

def test_gibbs_two_equal_points():
    g = Grid.uniform(0.0, 1.0, 2)
    m, lz = gibbs_normalize([0.0, 0.0], g)
    # trapezoid weights 1/2 each, so densities 1 and masses 1/2
    assert np.allclose(m.masses, [0.5, 0.5])
    g2 = Grid.finite(2)
    m2, lz2 = gibbs_normalize([0.0, 0.0], g2)
    assert np.allclose(m2.density, [0.5, 0.5])
    assert lz2 == pytest.approx(np.log(2))


def test_gibbs_hand_summation(two_points):
    m, lz = gibbs_normalize([np.log(3.0), 0.0], two_points)
    assert np.allclose(m.density, [0.75, 0.25], atol=1e-15)
    assert lz == pytest.approx(np.log(4.0))


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=20), st.floats(-100, 100))
def test_gibbs_shift_invariance(vals, c):
    g = Grid.finite(len(vals))
    m1, lz1 = gibbs_normalize(vals, g)
    m2, lz2 = gibbs_normalize(np.array(vals) + c, g)
    assert np.allclose(m1.log_density, m2.log_density, atol=1e-12)
    assert lz2 - lz1 == pytest.approx(c, abs=1e-9)


def test_gibbs_huge_values_stay_finite(two_points):
    m, lz = gibbs_normalize([1000.0, -1000.0], two_points)
    assert m.mass == pytest.approx(1.0, abs=1e-12)
    assert np.isfinite(lz)


def test_gibbs_rejects_nonfinite_with_index(two_points):
    with pytest.raises(ValueError, match="index 1"):
        gibbs_normalize([0.0, np.nan], two_points)


def test_normalization_invariant_random(line64, rng):
    for _ in range(20):
        assert abs(random_measure(line64, rng).mass - 1.0) <= 1e-12


def test_unnormalized_construction_rejected(two_points):
    with pytest.raises(ValueError):
        GridMeasure(two_points, np.zeros(2))


def test_from_density_floors_zeros(two_points):
    m = from_density(two_points, [1.0, 0.0])
    assert np.all(np.isfinite(m.log_density))
    assert m.density[1] == pytest.approx(DENSITY_FLOOR, rel=1e-6)


# divergences

def test_kl_self_zero(line64, rng):
    m = random_measure(line64, rng)
    assert kl_divergence(m, m) == 0.0


def test_kl_hand_value(two_points):
    p = measure_from(two_points, [0.75, 0.25])
    q = measure_from(two_points, [0.5, 0.5])
    expected = 0.75 * np.log(1.5) + 0.25 * np.log(0.5)
    assert kl_divergence(p, q) == pytest.approx(expected, rel=1e-13)
    assert kl_divergence(p, q) == pytest.approx(0.130812, abs=1e-6)


def test_kl_matches_plain_sum(line64, rng):
    for _ in range(20):
        p, q = random_measure(line64, rng), random_measure(line64, rng)
        plain = float(p.masses @ (p.log_density - q.log_density))
        assert kl_divergence(p, q) == pytest.approx(plain, rel=1e-10)


def test_kl_resolves_tiny_divergence(line64):
    # second-order quantity well below machine epsilon
    u = uniform_measure(line64)
    d = 1e-10 * np.sin(2 * np.pi * line64.points[:, 0])
    p = gibbs_normalize(d, line64)[0]
    var = float(u.masses @ (d - u.integrate(d)) ** 2)
    assert kl_divergence(u, p) == pytest.approx(0.5 * var, rel=1e-4)


def test_pinsker_random_pairs(line64, rng):
    for _ in range(100):
        p, q = random_measure(line64, rng), random_measure(line64, rng)
        assert kl_divergence(p, q) >= 2 * tv_distance(p, q) ** 2


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=3, max_size=3), st.lists(st.floats(-20, 20), min_size=3, max_size=3))
def test_pinsker_property(a, b):
    g = Grid.finite(3)
    p, q = gibbs_normalize(a, g)[0], gibbs_normalize(b, g)[0]
    assert kl_divergence(p, q) + 1e-15 >= 2 * tv_distance(p, q) ** 2


def test_tv_examples(two_points):
    p = measure_from(two_points, [0.75, 0.25])
    q = measure_from(two_points, [0.5, 0.5])
    assert tv_distance(p, q) == pytest.approx(0.25)
    assert tv_distance(p, p) == 0.0


def test_tv_disjoint_limit(two_points):
    for eps in (1e-3, 1e-6, 1e-12):
        p = from_density(two_points, [1.0, eps])
        q = from_density(two_points, [eps, 1.0])
        assert tv_distance(p, q) == pytest.approx(1.0, abs=4 * eps)


def test_ratio_bounds(two_points):
    p = measure_from(two_points, [0.75, 0.25])
    u = uniform_measure(two_points)
    assert density_ratio_bounds(p, u) == pytest.approx((0.5, 1.5))
    assert density_ratio_bounds(u, u) == (1.0, 1.0)


def test_grid_mismatch():
    a = uniform_measure(Grid.uniform(0, 1, 4))
    b = uniform_measure(Grid.uniform(0, 2, 4))
    for fn in (kl_divergence, tv_distance, density_ratio_bounds):
        with pytest.raises(GridMismatchError):
            fn(a, b)


# mixing

def test_mix_endpoints(line64, rng):
    p, q = random_measure(line64, rng), random_measure(line64, rng)
    assert mix(p, q, 0.0) is p and mix(p, q, 1.0) is q


def test_mix_half_of_floored(two_points):
    p = from_density(two_points, [1.0, 1e-12])
    q = from_density(two_points, [1e-12, 1.0])
    assert np.allclose(mix(p, q, 0.5).masses, [0.5, 0.5], atol=1e-12)


def test_mix_is_linear_in_masses(line64, rng):
    p, q = random_measure(line64, rng), random_measure(line64, rng)
    m = mix(p, q, 0.3)
    assert np.allclose(m.masses, 0.7 * p.masses + 0.3 * q.masses, atol=1e-15)


@pytest.mark.parametrize("eps", [-0.1, 1.5])
def test_mix_rejects_weight(line64, rng, eps):
    p = random_measure(line64, rng)
    with pytest.raises(ValueError):
        mix(p, p, eps)


def test_mix_kl_vanishes_continuously(line64, rng):
    p, q = random_measure(line64, rng), random_measure(line64, rng)
    vals = [kl_divergence(mix(p, q, e), p) for e in (1e-1, 1e-2, 1e-3, 1e-4)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    # KL(mix, p) ~ eps^2 chi^2(q|p) / 2: three decades of eps give about six of KL
    assert vals[-1] < 1e-5 * vals[0]


# CSV

def test_measure_csv_round_trip(tmp_path, rng):
    for g in (Grid.uniform(-1, 1, 17), Grid.box([(0, 1), (0, 1)], 4)):
        m = random_measure(g, rng)
        write_measure_csv(tmp_path / "m.csv", m)
        back = read_measure_csv(tmp_path / "m.csv")
        assert np.array_equal(back.log_density, m.log_density)
        assert np.array_equal(back.grid.points, g.points)
        assert np.array_equal(back.grid.weights, g.weights)
