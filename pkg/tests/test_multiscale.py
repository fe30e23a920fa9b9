import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otlinlab import multiscale as ms
from otlinlab.measures import Ball, Mollifier, lebesgue_quadrature, rng_stream
from otlinlab.transport import Coupling


def _translation(q, b):
    idx = np.arange(q.size)
    return Coupling(q.points, q.points + np.asarray(b, float), idx, idx, q.weights.copy())


@pytest.fixture(scope="module")
def identity_run():
    q = lebesgue_quadrature(Ball((0.0, 0.0), 24.0), 48)
    return ms.run_campanato(Coupling.identity(q), q, 24.0, ms.RateFunction(), ms.CampanatoParams(R_min=2.0))


@pytest.fixture(scope="module")
def translation_run():
    # quadrature spacing 0.25 resolves the shift, so the crossing flux is b . nu
    q = lebesgue_quadrature(Ball((0.0, 0.0), 16.0), 128)
    b = np.array([0.3, -0.2])
    return ms.run_campanato(_translation(q, b), q, 16.0, ms.RateFunction(), ms.CampanatoParams(R_min=1.0)), b


def test_rate_function_geometric_limits():
    root = ms.rate_function_check(ms.RateFunction("power", 0.5), 1.0, 200)
    assert root["ratio"] == pytest.approx(1 / (1 - 2**-0.5), rel=1e-12)
    assert abs(root["ratio"] - 3.4142) < 1e-4
    flat = ms.rate_function_check(ms.RateFunction("power", 0.0), 1.0, 80)
    assert flat["ratio"] == pytest.approx(2.0, rel=1e-12)
    assert flat["verdict"] == "ok"


def test_linear_rate_violates_the_hypothesis():
    lin = ms.rate_function_check(ms.RateFunction("power", 1.0), 1.0, 30)
    assert lin["ratio"] == pytest.approx(31.0)
    assert lin["verdict"] == "violates rate hypothesis"


def test_log_rate_is_admissible():
    beta = ms.RateFunction("log", offset=math.e)
    assert beta(0.0) == pytest.approx(1.0)
    check = ms.rate_function_check(beta, 4.0, 40)
    assert check["verdict"] == "ok"
    cert = ms.certify_rate(beta, [4.0, 8.0, 16.0])
    assert cert.C_beta == pytest.approx(max(ms.rate_function_check(beta, r, 40)["ratio"] for r in (4.0, 8.0, 16.0)))
    assert ms.RateFunction.from_dict(cert.to_dict()) == cert


def test_rate_function_validation():
    with pytest.raises(ValueError):
        ms.RateFunction("log", offset=0.5)
    with pytest.raises(ValueError):
        ms.RateFunction("cubic")
    with pytest.raises(ValueError):
        ms.rate_function_check(ms.RateFunction(), 0.5, 4)


def test_identity_data_has_no_shifts(identity_run):
    run = identity_run
    assert run.stop_reason == "reached R_min"
    assert run.K >= 1
    for lv in run.levels:
        assert np.all(lv.b == 0.0)
        assert lv.E == 0.0
        assert 3 * lv.Rbar < lv.R < 4 * lv.Rbar


def test_identity_residuals_vanish(identity_run):
    run = identity_run
    for lv in run.levels:
        cs = ms.cumulative_shift_representation(run, lv.k, lv.R)
        assert max(cs["r1"], cs["r2"], cs["r3"]) <= 1e-12
        fl = ms.flux_linearization_residual(run, lv.k, lv.R)
        assert max(fl["weak"], fl["ball"]) <= 1e-12
        if lv.k:
            assert ms.additivity_residual(run, lv.k) == 0.0
    table = ms.diagnostics_table(run)
    assert np.abs(table[:, [1, 2, 3]]).max() <= 1e-12


def test_ladder_is_nested(identity_run):
    nest = identity_run.ladder.nesting()
    assert all(1.5 <= r <= 4.0 for r in nest)


def test_translation_shift_is_recovered(translation_run):
    run, b = translation_run
    assert np.linalg.norm(run.levels[0].b - b) <= 0.1 * np.linalg.norm(b)
    for lv in run.levels[1:]:
        assert np.linalg.norm(lv.b) <= 0.1 * np.linalg.norm(b)
    for lv in run.levels:
        assert ms.cumulative_shift_representation(run, lv.k, lv.R)["r1"] <= 1e-9


def test_shift_bookkeeping(translation_run):
    run, _ = translation_run
    pi0 = run.levels[0].coupling
    for lv in run.levels:
        assert np.allclose(run.h(lv.k), lv.h_before + lv.b, atol=0, rtol=0)
        back = run.unshifted(lv.k)
        assert np.abs(back.y - pi0.y).max() <= 1e-12
        assert np.array_equal(back.x, pi0.x)


def test_level_table_and_export(translation_run, tmp_path):
    run, _ = translation_run
    table = ms.level_table(run)
    assert table.shape == (run.K + 1, len(ms.LEVEL_COLUMNS))
    assert np.all(np.isfinite(table))
    ms.export_run(run, tmp_path / "levels.csv", tmp_path / "diag.csv")
    assert (tmp_path / "levels.csv").read_text().splitlines()[0] == ",".join(ms.LEVEL_COLUMNS)
    assert (tmp_path / "diag.csv").read_text().splitlines()[0] == ",".join(ms.DIAG_COLUMNS)


def test_diagnostic_radii_are_geometric(translation_run):
    run, _ = translation_run
    radii = ms.diagnostic_radii(run)
    assert radii[0] == run.levels[0].R
    assert radii[-1] >= run.levels[-1].R * (1 - 1e-12)
    assert np.allclose(np.array(radii[:-1]) / np.array(radii[1:]), math.sqrt(2))


def test_diagnostic_decomposition_is_consistent(translation_run):
    run, _ = translation_run
    for R in ms.diagnostic_radii(run):
        d = ms.error_diagnostics(run, R)
        assert d["decomposition_defect"] <= 1e-12 * (1 + d["e_weak1"])
        assert d["e_weak1"] <= d["triangle_bound"] * (1 + 1e-12) + 1e-15


def test_single_inside_pair_additivity_is_exact():
    # both levels see the same pair fully inside; after the shift the flux changes by -m b
    x = np.array([[0.2, 0.1]])
    y = np.array([[0.5, -0.3]])
    b = np.array([0.05, 0.02])
    pi0 = Coupling.from_pairs(x, y, 1.0)
    pi1 = pi0.shifted_targets(b)
    j0, m0 = ms._ball_flux(pi0, 2.0)
    j1, m1 = ms._ball_flux(pi1, 2.0)
    assert m0 == m1 == 1.0
    assert np.array_equal(j1 + b * m1 - j0, np.zeros(2))


def test_coupling_errors_identity_is_zero():
    q = lebesgue_quadrature(Ball((0.0, 0.0), 3.0), 16)
    e = ms.coupling_errors(Coupling.identity(q), np.zeros(2), Mollifier(2.0))
    assert e["e_weak1"] == e["e_weak2"] == e["e_strong"] == e["window_energy"] == 0.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), bx=st.floats(-2, 2), by=st.floats(-2, 2), R=st.floats(0.5, 3.0))
def test_joint_shift_equivariance(seed, bx, by, R):
    rng = rng_stream(seed, "test", "equivariance")
    x = rng.uniform(-3, 3, (60, 2))
    pi = Coupling.from_pairs(x, x + rng.normal(0, 0.5, (60, 2)), rng.uniform(0.5, 1.5, 60))
    h = rng.normal(0, 0.3, 2)
    b = np.array([bx, by])
    eta = Mollifier(R)
    a = ms.coupling_errors(pi, h, eta)
    c = ms.coupling_errors(pi.shifted_targets(-b), h + b, eta)
    for key in ("e_weak1", "e_weak2", "e_strong"):
        assert c[key] == pytest.approx(a[key], rel=1e-12, abs=1e-12)
