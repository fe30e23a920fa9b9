import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from otlinlab.measures import Ball, DiscreteMeasure, lebesgue_quadrature, rng_stream
from otlinlab.transport import (Coupling, TransportError, brute_force_oracle, check_monotone,
                                circle_wasserstein_sq, solve_exact, wasserstein_sq_localized)


def _random_pair(seed, n, m=None, unit=False):
    rng = rng_stream(seed, "test", "transport")
    m = n if m is None else m
    a = rng.uniform(-1, 1, (n, 2))
    b = rng.normal(0, 0.7, (m, 2))
    if unit:
        return DiscreteMeasure(a, np.ones(n)), DiscreteMeasure(b, np.ones(m))
    wa = rng.uniform(0.3, 1.7, n)
    wb = rng.uniform(0.3, 1.7, m)
    return DiscreteMeasure(a, wa), DiscreteMeasure(b, wb * wa.sum() / wb.sum())


def _lp_oracle(mu, nu):
    """Transportation LP solved by scipy's HiGHS, independent of the network simplex."""
    n, m = mu.size, nu.size
    d = mu.points[:, None, :] - nu.points[None, :, :]
    c = (d**2).sum(-1).ravel()
    A = np.zeros((n + m, n * m))
    for i in range(n):
        A[i, i * m:(i + 1) * m] = 1
    for j in range(m):
        A[n + j, j::m] = 1
    res = linprog(c, A_eq=A, b_eq=np.concatenate([mu.weights, nu.weights]), bounds=(0, None), method="highs")
    return res.fun


def test_single_pair_cost():
    pi, rep = solve_exact(DiscreteMeasure([[0.0, 0.0]], [1.0]), DiscreteMeasure([[3.0, 4.0]], [1.0]))
    assert rep.cost == 25.0
    assert pi.size == 1


def test_identical_measures_cost_zero():
    mu, _ = _random_pair(1, 30)
    pi, rep = solve_exact(mu, mu)
    assert rep.cost == 0.0
    assert np.array_equal(pi.x, pi.y)


def test_five_unit_atoms_seed_11_matches_oracle_exactly():
    mu, nu = _random_pair(11, 5, unit=True)
    _, rep = solve_exact(mu, nu)
    assert rep.cost == brute_force_oracle(mu, nu)


@pytest.mark.parametrize("seed", range(200))
def test_oracle_equivalence(seed):
    n = 2 + seed % 6
    mu, nu = _random_pair(1000 + seed, n, unit=True)
    _, rep = solve_exact(mu, nu)
    assert rep.cost == brute_force_oracle(mu, nu)


@pytest.mark.parametrize("seed", range(20))
def test_weighted_instances_match_lp(seed):
    mu, nu = _random_pair(seed, 3 + seed % 9, 2 + (seed * 7) % 11)
    _, rep = solve_exact(mu, nu)
    assert rep.cost == pytest.approx(_lp_oracle(mu, nu), rel=1e-9, abs=1e-12)


def test_brute_force_examples():
    a = DiscreteMeasure([[0.0, 0.0]], [1.0])
    b = DiscreteMeasure([[1.0, 2.0]], [1.0])
    assert brute_force_oracle(a, b) == 5.0
    line = DiscreteMeasure([[0.0, 0.0], [1.0, 0.0]], [1.0, 1.0])
    assert brute_force_oracle(line, line) == 0.0
    with pytest.raises(ValueError):
        brute_force_oracle(*_random_pair(0, 9, unit=True))


def test_marginals_are_reproduced():
    mu, nu = _random_pair(3, 40, 55)
    pi, _ = solve_exact(mu, nu)
    assert np.allclose(pi.source_weights(), mu.weights, rtol=1e-9)
    assert np.allclose(pi.target_weights(), nu.weights, rtol=1e-9)
    assert np.all(pi.mass > 0)


def test_unbalanced_and_too_large():
    mu = DiscreteMeasure([[0.0, 0.0]], [1.0])
    with pytest.raises(TransportError, match="unbalanced"):
        solve_exact(mu, DiscreteMeasure([[1.0, 0.0]], [1.5]))
    a, b = _random_pair(0, 20, unit=True)
    with pytest.raises(TransportError, match="instance too large"):
        solve_exact(a, b, size_cap=100)


def test_ssp_and_simplex_agree():
    mu, nu = _random_pair(5, 60, unit=True)
    _, r1 = solve_exact(mu, nu, method="simplex")
    _, r2 = solve_exact(mu, nu, method="ssp")
    assert r1.cost == pytest.approx(r2.cost, rel=1e-12)


def test_monotonicity_of_optimal_couplings():
    mu, nu = _random_pair(8, 50, unit=True)
    pi, _ = solve_exact(mu, nu)
    rep = check_monotone(pi)
    pts = np.vstack([mu.points, nu.points])
    assert rep.monotonicity_violation >= -1e-9 * float(np.sum(np.ptp(pts, axis=0) ** 2))


def test_identity_coupling_is_monotone():
    mu, _ = _random_pair(2, 20)
    assert check_monotone(Coupling.identity(mu)).monotonicity_violation == 0.0


def test_swapped_pair_is_flagged():
    x = np.array([[0.0, 0.0], [1.0, 0.0]])
    pi = Coupling.from_pairs(x, x[::-1], np.ones(2))
    assert check_monotone(pi).monotonicity_violation < 0


def test_translation_of_a_measure_costs_h_squared():
    # a rigid shift is the gradient of a convex function, hence optimal
    q = lebesgue_quadrature(Ball((0.0, 0.0), 4.0), 48)
    h = np.array([0.1, 0.0])
    _, rep = solve_exact(q.translated(h), q)
    assert rep.cost / q.total_mass == pytest.approx(0.01, rel=1e-9)


def test_localized_translated_quadrature_cost_between_bounds():
    # clipping to the ball lets the optimal plan spread the lost crescent, so the
    # cost lies below the rigid-shift value h^2 but stays of order h^2
    q = lebesgue_quadrature(Ball((0.0, 0.0), 4.0), 128)
    cost, kappa = wasserstein_sq_localized(q.translated((0.1, 0.0)), Ball((0.0, 0.0), 4.0), 128)
    per_mass = cost / (kappa * math.pi * 16)
    assert 0.01 / 4 <= per_mass <= 0.01


def test_localized_quadrature_against_itself_is_zero():
    q = lebesgue_quadrature(Ball((0.0, 0.0), 2.0), 32)
    cost, kappa = wasserstein_sq_localized(q, Ball((0.0, 0.0), 2.0), 32)
    assert cost == pytest.approx(0.0, abs=1e-20)
    assert kappa == pytest.approx(1.0, rel=1e-12)


def test_localized_single_atom_radial_cost():
    # pi * int_0^1 r^2 2 r dr = pi / 2
    atom = DiscreteMeasure([[0.0, 0.0]], [math.pi])
    cost, kappa = wasserstein_sq_localized(atom, Ball((0.0, 0.0), 1.0), 128)
    assert cost == pytest.approx(math.pi / 2, rel=1e-3)
    assert kappa == pytest.approx(1.0)


def test_localized_empty_restriction_errors():
    with pytest.raises(TransportError):
        wasserstein_sq_localized(DiscreteMeasure([[5.0, 5.0]], [1.0]), Ball((0.0, 0.0), 1.0), 16)


def test_circle_examples():
    f = np.zeros(512)
    assert circle_wasserstein_sq(f + 1, f + 1) == 0.0
    f = np.zeros(512)
    g = np.zeros(512)
    f[0], g[128] = 1.0, 1.0
    assert circle_wasserstein_sq(f, g, 1.0) == pytest.approx((math.pi / 2) ** 2, rel=1e-12)
    f = np.zeros(512)
    g = np.zeros(512)
    f[[0, 256]] = 1.0
    g[[64, 320]] = 1.0
    assert circle_wasserstein_sq(f, g, 1.0) == pytest.approx(2 * (math.pi / 4) ** 2, rel=1e-12)
    # geodesic distances scale with the radius
    assert circle_wasserstein_sq(f, g, 3.0) == pytest.approx(9 * 2 * (math.pi / 4) ** 2, rel=1e-12)


def test_circle_uses_the_shorter_arc():
    f = np.zeros(512)
    g = np.zeros(512)
    f[10], g[500] = 1.0, 1.0
    d = 2 * math.pi * 22 / 512
    assert circle_wasserstein_sq(f, g) == pytest.approx(d * d, rel=1e-12)


def test_circle_mass_mismatch():
    with pytest.raises(ValueError):
        circle_wasserstein_sq(np.ones(8), 2 * np.ones(8))


def test_coupling_csv_round_trip(tmp_path):
    mu, nu = _random_pair(4, 12, 9)
    pi, _ = solve_exact(mu, nu)
    pi.to_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "x1,y1,x2,y2,m"
    back = Coupling.from_csv(tmp_path / "c.csv")
    assert np.array_equal(back.x, pi.x) and np.array_equal(back.y, pi.y)
    assert np.array_equal(back.mass, pi.mass)


_seeds = st.integers(0, 2**31)


@settings(max_examples=30, deadline=None)
@given(seed=_seeds, s=st.floats(0.1, 10.0))
def test_cost_scales_quadratically(seed, s):
    mu, nu = _random_pair(seed, 8, 6)
    _, r1 = solve_exact(mu, nu)
    _, r2 = solve_exact(mu.scaled(s), nu.scaled(s))
    assert r2.cost == pytest.approx(s * s * r1.cost, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=_seeds, shift=st.tuples(st.floats(-5, 5), st.floats(-5, 5)))
def test_cost_translation_invariant(seed, shift):
    mu, nu = _random_pair(seed, 7, 9)
    _, r1 = solve_exact(mu, nu)
    _, r2 = solve_exact(mu.translated(shift), nu.translated(shift))
    assert r2.cost == pytest.approx(r1.cost, rel=1e-12, abs=1e-13)


@settings(max_examples=30, deadline=None)
@given(seed=_seeds)
def test_triangle_inequality(seed):
    rng = rng_stream(seed, "test", "triangle")
    ms = []
    for _ in range(3):
        n = int(rng.integers(2, 9))
        w = rng.uniform(0.5, 1.5, n)
        ms.append(DiscreteMeasure(rng.normal(0, 1, (n, 2)), w / w.sum()))
    d = lambda a, b: math.sqrt(solve_exact(a, b)[1].cost)  # noqa: E731
    assert d(ms[0], ms[2]) <= d(ms[0], ms[1]) + d(ms[1], ms[2]) + 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=_seeds)
def test_subadditivity_over_splits(seed):
    rng = rng_stream(seed, "test", "split")
    mu1, nu1 = _random_pair(seed, 5, 4)
    mu2, nu2 = _random_pair(seed + 1, 4, 6)
    mu2 = DiscreteMeasure(mu2.points + 0.5, mu2.weights * rng.uniform(0.5, 2))
    nu2 = DiscreteMeasure(nu2.points, nu2.weights * (mu2.total_mass / nu2.total_mass))
    joint = solve_exact(DiscreteMeasure(np.vstack([mu1.points, mu2.points]), np.concatenate([mu1.weights, mu2.weights])),
                        DiscreteMeasure(np.vstack([nu1.points, nu2.points]), np.concatenate([nu1.weights, nu2.weights])))
    parts = solve_exact(mu1, nu1)[1].cost + solve_exact(mu2, nu2)[1].cost
    assert joint[1].cost <= parts * (1 + 1e-12) + 1e-14
