"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Lines are printed as they are decided and repeated in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from otlinlab import multiscale as ms
from otlinlab.harness import experiments as ex
from otlinlab.harness import verify as vf
from otlinlab.harness.config import load_config
from otlinlab.measures import rng_stream
from otlinlab.transport import Coupling

from conftest import ACCEPTANCE_LINES


def _report(number, name, ok, detail, capsys=None):
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    assert ok, line


def _timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


def _checks(names):
    """Run named identity checks; returns (all passed, summary text, seconds)."""
    t0 = time.perf_counter()
    parts, ok = [], True
    for name in names:
        value, tol = vf.CHECKS[name]()
        ok &= value <= tol
        parts.append(f"{name}={value:.3g} (tol {tol:g})")
    return ok, ", ".join(parts), time.perf_counter() - t0


def test_criterion_01_telescoping(capsys):
    ok, text, dt = _checks(["telescoping"])
    _report(1, "telescoping", ok and dt < 1.0, f"{text}, {dt:.2f} s", capsys)


def test_criterion_02_dipole_calculus(capsys):
    ok, text, dt = _checks(["dipole_gradient_fd", "dipole_jump"])
    _report(2, "dipole calculus", ok and dt < 1.0, f"{text}, {dt:.2f} s", capsys)


def test_criterion_03_green_representation(capsys):
    ok, text, dt = _checks(["green_representation"])
    _report(3, "green representation", ok and dt < 30.0, f"{text}, {dt:.1f} s", capsys)


def test_criterion_04_solver_consistency(capsys):
    t0 = time.perf_counter()
    ok, text, _ = _checks(["neumann_cos_flux", "mean_value_chain"])
    ratios = vf.convergence_ratios()
    conv = all(3.5 <= q <= 4.5 for q in ratios)
    dt = time.perf_counter() - t0
    _report(4, "solver consistency", ok and conv and dt < 30.0,
            f"{text}, ratios {[round(q, 3) for q in ratios]}, {dt:.1f} s", capsys)


def test_criterion_05_ot_exactness(capsys):
    ok, text, dt = _checks(["ot_exactness", "ot_monotone"])
    _report(5, "optimal transport exactness", ok and dt < 60.0, f"{text}, {dt:.1f} s", capsys)


def test_criterion_06_eulerian_identities(capsys):
    ok, text, dt = _checks(["weak_continuity", "divergence_identity", "localized_energy"])
    _report(6, "eulerian identities", ok and dt < 30.0, f"{text}, {dt:.1f} s", capsys)


@pytest.mark.slow
def test_criterion_07_harmonic_trend(capsys):
    cfg = load_config("harmonic", overrides=["seeds=[1,2,3,4,5]", "geometry.Rbar=16.0",
                                             "generator.kind=perturbed_lattice", "generator.spacing=1.0"])
    fam, dt = _timed(ex.harmonic_family, cfg, [0.1, 0.05, 0.025])
    votes = "; ".join(f"{p['amplitudes']}: {sum(p['votes'])}/{len(p['votes'])}" for p in fam["pairs"])
    ratios = {a: [round(r, 4) if r is not None else None for r in v] for a, v in fam["ratios"].items()}
    _report(7, "harmonic approximation trend", fam["passed"] and dt < 300.0,
            f"ratios {ratios}, votes {votes}, finite {fam['finite']}, {dt:.0f} s", capsys)


@pytest.fixture(scope="module")
def campanato_runs():
    cfg = load_config("multiscale", overrides=["seeds=[1,2,3,4,5]", "geometry.Rbar=64.0", "generator.kind=poisson",
                                               'beta={"kind": "log", "offset": %r}' % math.e])
    reports, dt = _timed(ex.run_seeds, ex.multiscale_experiment, cfg, cfg["seeds"])
    return reports, dt


@pytest.mark.slow
def test_criterion_08_campanato_boundedness(campanato_runs, capsys):
    reports, dt = campanato_runs
    ok = dt < 900.0
    parts = []
    for r in reports:
        if "error" in r:
            ok = False
            parts.append(f"seed {r['seed']} error {r['error']}")
            continue
        eb = np.array(r["E_over_beta"])
        bb = np.array(r["b_sq_over_beta"])
        spread = eb.max() / eb.min() if eb.min() > 0 else math.inf
        med = float(np.median(bb))
        shifts_ok = bool(np.all(bb <= 10 * med)) if med > 0 else bool(np.all(bb == 0))
        ok &= spread <= 10 and shifts_ok
        parts.append(f"seed {r['seed']} levels {len(eb)} spread {spread:.2f} max|b|^2/median {bb.max() / med if med > 0 else 0:.2f}")
    _report(8, "campanato boundedness", ok, "; ".join(parts) + f", {dt:.0f} s", capsys)


def _equivariance_defect(n_trials=20):
    worst = 0.0
    from otlinlab.measures import Mollifier
    for k in range(n_trials):
        rng = rng_stream(k, "acceptance", "equivariance")
        x = rng.uniform(-6, 6, (300, 2))
        pi = Coupling.from_pairs(x, x + rng.normal(0, 0.4, (300, 2)), rng.uniform(0.5, 1.5, 300))
        h, b = rng.normal(0, 0.3, 2), rng.normal(0, 1.0, 2)
        eta = Mollifier(float(rng.uniform(1, 4)))
        a = ms.coupling_errors(pi, h, eta)
        c = ms.coupling_errors(pi.shifted_targets(-b), h + b, eta)
        for key in ("e_weak1", "e_weak2", "e_strong"):
            worst = max(worst, abs(a[key] - c[key]) / max(1.0, abs(a[key])))
    return worst


@pytest.mark.slow
def test_criterion_09_main_diagnostics(campanato_runs, capsys):
    reports, _ = campanato_runs
    ok = True
    parts = []
    good = [r for r in reports if "error" not in r]
    ok &= len(good) == len(reports)
    for r in good:
        q = r["e_weak1_max_over_median"]
        ok &= q is not None and q <= 5
        parts.append(f"seed {r['seed']} max/median {q:.2f}" if q is not None else f"seed {r['seed']} undefined")
    eq = _equivariance_defect()
    ok &= eq <= 1e-12
    fit = ex.merged_fits(good)["e_weak1_normalized_vs_R"]
    slope = fit.get("slope")
    ok &= slope is not None and -0.5 <= slope <= 0.5
    _report(9, "main diagnostics", ok,
            "; ".join(parts) + f", equivariance {eq:.2g}, slope {slope if slope is None else round(slope, 3)}", capsys)


@pytest.mark.slow
def test_criterion_10_restriction_trend(capsys):
    cfg = load_config("restriction", overrides=["seeds=[1,2,3,4,5,6,7,8,9,10]", "generator.kind=translated_quadrature"])
    reports, dt = _timed(ex.run_seeds, ex.restriction_experiment, cfg, cfg["seeds"])
    ratios = [r.get("ratio") for r in reports]
    finite = all(q is not None and np.isfinite(q) and q > 0 for q in ratios)
    spread = max(ratios) / min(ratios) if finite else math.inf
    _report(10, "restriction trend", finite and spread <= 3 and dt < 300.0,
            f"ratios {[round(q, 4) if q else q for q in ratios]}, spread {spread:.3f}, {dt:.0f} s", capsys)
