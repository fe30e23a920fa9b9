import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otlinlab import poisson as po
from otlinlab.harness.verify import check_dipole_gradient_fd, check_telescoping, convergence_ratios
from otlinlab.measures import Ball, DiscreteMeasure, Mollifier, lebesgue_quadrature


def test_cos_flux_gives_unit_gradient_at_origin():
    field = po.solve_neumann(None, np.cos, 1.0, 256, 256)
    assert np.allclose(po.gradient_at_origin(field), [1.0, 0.0], atol=1e-6)
    pts = np.array([[0.3, 0.2], [-0.5, 0.4], [0.1, -0.8]])
    assert np.allclose(field.value(pts), pts[:, 0], atol=1e-6)


def test_zero_data_gives_zero_field():
    field = po.solve_neumann(None, None, 2.0, 64, 64)
    assert field.c == 0.0
    assert np.all(field.coef == 0)


def test_point_mass_profile_and_compatibility_constant():
    mu = Mollifier(0.1).as_measure((0.0, 0.0), 1.0)
    field = po.solve_neumann(mu, None, 1.0, 256, 256)
    assert field.c == pytest.approx(-1 / math.pi, rel=1e-12)
    r = np.linspace(0.2, 0.9, 15)
    ur, _, _ = field.polar_gradient(np.column_stack([r, np.zeros_like(r)]))
    # (1/2pi) log r plus the compensating quadratic -r^2/(4 pi)
    exact = 1 / (2 * math.pi * r) - r / (2 * math.pi)
    assert np.max(np.abs(ur - exact) / np.abs(exact)) <= 0.02


def test_field_has_zero_mean():
    mu = Mollifier(0.3).as_measure((0.2, -0.1), 2.0)
    field = po.solve_neumann(mu, lambda t: np.sin(2 * t), 1.0, 128, 128)
    assert abs(field.mean()) <= 1e-9


@pytest.mark.parametrize("a,b", [(1.0, 0.0), (0.0, 1.0), (2.5, -0.7)])
def test_linear_flux_gradient(a, b):
    field = po.solve_neumann(None, lambda t: a * np.cos(t) + b * np.sin(t), 1.5, 128, 128)
    assert np.allclose(po.gradient_at_origin(field), [a, b], atol=1e-6)


def test_radial_field_has_zero_gradient_at_origin():
    field = po.solve_neumann(Mollifier(0.5).as_measure(), None, 1.0, 64, 64)
    assert np.allclose(po.gradient_at_origin(field), 0.0, atol=1e-12)


def test_mollified_average_of_quadratic_is_zero():
    # flux R on the boundary of B_R with no source is u = |x|^2 / 2 (c = 2)
    field = po.solve_neumann(None, lambda t: np.ones_like(t), 1.0, 128, 128)
    assert field.c == pytest.approx(2.0)
    assert np.allclose(po.mollified_gradient_average(field, Mollifier(0.6)), 0.0, atol=1e-12)


def test_mollified_average_of_affine_field():
    field = po.solve_neumann(None, lambda t: 3 * np.cos(t) - np.sin(t), 1.0, 128, 128)
    assert np.allclose(po.mollified_gradient_average(field, Mollifier(0.7)), [3.0, -1.0], atol=1e-6)


def test_boundary_moment_examples():
    field = po.solve_neumann(None, np.cos, 1.0, 128, 128)
    assert np.allclose(po.boundary_moment(field), [1.0, 0.0], atol=1e-12)
    zero = po.solve_neumann(None, None, 1.0, 64, 64)
    assert np.all(po.boundary_moment(zero) == 0.0)


def test_dipole_value_examples():
    dip = po.AnnulusDipole(1.0, 2.0, 1)
    assert po.dipole_value(dip, [0.5, 0.0])[0] == pytest.approx(-3 / (16 * math.pi), rel=1e-14)
    assert po.dipole_value(dip, [2.5, 0.3])[0] == 0.0
    out = po.dipole_value(dip, [1 + 1e-13, 0.0])[0]
    inside = po.dipole_value(dip, [1 - 1e-13, 0.0])[0]
    assert out - inside == pytest.approx(1 / math.pi, rel=1e-10)
    assert po.dipole_jump(dip, [1.0, 0.0])[0] == pytest.approx(1 / math.pi)


def test_dipole_gradient_examples():
    dip = po.AnnulusDipole(1.0, 2.0, 1)
    assert np.allclose(po.dipole_gradient(dip, [0.2, 0.1]), [[-3 / (8 * math.pi), 0.0]], rtol=1e-14)
    rho = 1.5
    g = po.dipole_gradient(dip, [0.0, rho])[0]
    assert g == pytest.approx([(1 / (2 * math.pi)) * (1 / 4 + 1 / rho**2), 0.0], abs=1e-15)


def test_dipole_second_direction_is_the_rotation():
    d1, d2 = po.AnnulusDipole(0.5, 2.0, 1), po.AnnulusDipole(0.5, 2.0, 2)
    p = po.default_probe_points(50, 2.0)
    rot = np.column_stack([p[:, 1], -p[:, 0]])  # rotate by -pi/2 so x2 becomes x1
    assert np.allclose(po.dipole_value(d2, p), po.dipole_value(d1, rot), atol=1e-15)


def test_dipole_calculus_checks():
    value, tol = check_dipole_gradient_fd()
    assert value <= tol


def test_dipole_validation():
    with pytest.raises(ValueError):
        po.AnnulusDipole(2.0, 1.0)
    with pytest.raises(ValueError):
        po.AnnulusDipole(0.5, 1.0, 3)


def test_green_flux_examples():
    assert np.all(po.green_flux_via_dipole(DiscreteMeasure.empty(), 0.3, 1.0) == 0)
    q = lebesgue_quadrature(Ball((0.0, 0.0), 1.0), 64)
    assert np.abs(po.green_flux_via_dipole(q, 0.35, 1.0)).max() <= 1e-3
    with pytest.raises(po.PoissonError):
        po.green_flux_via_dipole(DiscreteMeasure([[0.3, 0.0]], [1.0]), 0.3, 1.0)


def test_green_flux_single_atom_against_solver():
    mu = Mollifier(0.04).as_measure((0.6, 0.0), 1.0)
    a = po.green_flux_via_dipole(mu, 0.35, 1.0)
    field = po.solve_neumann(mu, None, 1.0, 256, 256)
    b = po.boundary_moment(field, 0.35)
    assert np.linalg.norm(a - b) <= 0.02 * np.linalg.norm(a)
    # the annulus branch: -(x1/R^2 + x1/|x|^2) / 2 pi at the atom
    assert a[0] == pytest.approx(-(0.6 + 1 / 0.6) / (2 * math.pi), rel=1e-3)


def test_telescoping():
    value, tol = check_telescoping()
    assert value <= tol
    assert po.telescoping_check((4.0, 1.0)) == 0.0
    outside = np.array([[5.0, 0.1], [-4.5, 3.0]])
    assert po.telescoping_check((4.0, 2.0, 1.0), outside) == 0.0
    with pytest.raises(ValueError):
        po.telescoping_check((1.0, 2.0, 3.0))


def test_second_order_convergence():
    ratios = convergence_ratios()
    assert all(3.5 <= q <= 4.5 for q in ratios)


def test_input_validation():
    with pytest.raises(po.PoissonError):
        po.solve_neumann(None, None, 1.0, 64, 48)
    with pytest.raises(po.PoissonError):
        po.solve_neumann(None, None, 1.0, 16, 64)
    bad = np.zeros(64)
    bad[3] = np.nan
    with pytest.raises(po.PoissonError):
        po.solve_neumann(None, bad, 1.0, 64, 64)


def test_fault_injection_is_scoped():
    with po.inject_faults("dipole_gradient_sign"):
        assert check_dipole_gradient_fd()[0] > 1e-6
        assert check_telescoping()[0] <= 1e-12
    assert check_dipole_gradient_fd()[0] <= 1e-6
    with pytest.raises(ValueError):
        with po.inject_faults("no_such_fault"):
            pass


def test_field_csv(tmp_path):
    field = po.solve_neumann(None, np.cos, 1.0, 32, 32)
    field.to_csv(tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "r,theta,u,ur,utheta"
    assert len(lines) == 1 + 32 * 32


@settings(max_examples=20, deadline=None)
@given(a=st.floats(0.1, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_solver_is_linear_in_the_data(a, b, seed):
    rng = np.random.default_rng(seed)
    f1 = rng.normal(size=64)
    f2 = rng.normal(size=64)
    mu = DiscreteMeasure(rng.uniform(-0.5, 0.5, (20, 2)), rng.uniform(0.1, 1.0, 20))
    u1 = po.solve_neumann(mu, f1, 1.0, 64, 64)
    u2 = po.solve_neumann(None, f2, 1.0, 64, 64)
    # measure weights must stay positive, so the source scale a is positive
    u = po.solve_neumann(DiscreteMeasure(mu.points, mu.weights * a), a * f1 + b * f2, 1.0, 64, 64)
    scale = 1 + np.abs(u.coef).max()
    assert np.abs(u.coef - (a * u1.coef + b * u2.coef)).max() <= 1e-12 * scale


def test_total_field_splits_into_source_and_flux_parts():
    rng = np.random.default_rng(3)
    mu = DiscreteMeasure(rng.uniform(-0.6, 0.6, (30, 2)), np.full(30, math.pi / 30))
    g = rng.normal(size=128)
    g -= g.mean()
    u = po.solve_neumann(mu, g, 1.0, 128, 128, subtract_one=True)
    v = po.solve_neumann(mu, None, 1.0, 128, 128, subtract_one=True)
    phi = po.solve_neumann(None, g, 1.0, 128, 128)
    p = po.default_probe_points(60, 0.9)
    assert np.abs(u.gradient(p) - v.gradient(p) - phi.gradient(p)).max() <= 1e-12 * (1 + np.abs(u.gradient(p)).max())
