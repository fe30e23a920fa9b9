"""Experiment pipelines: data generation, one-step harmonic approximation,
restriction to balls and the multiscale sweep.

Every pipeline is a pure function of (config, seed) and returns a JSON-able
report that embeds the resolved configuration.
"""

from __future__ import annotations

import copy
import math
import os
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .. import eulerian as eu
from .. import multiscale as ms
from ..measures import (Ball, DiscreteMeasure, lattice_sites, lebesgue_quadrature, normalize_to_mass,
                        perturbed_lattice, restrict, rng_stream, sample_poisson_process)
from ..poisson import solve_neumann
from ..transport import Coupling, solve_exact, wasserstein_sq_localized
from .fits import fit_scaling

WINDOW_FACTOR = {"harmonic": 6.0, "multiscale": 1.0, "restriction": 6.0, "gen": 1.0, "ot": 1.0}


def _solver_kw(cfg):
    return {"k_neighbors": int(cfg["solver"]["k_neighbors"])}


def _cells(cfg, radius):
    return max(8, int(round(2 * radius * float(cfg["solver"]["cells_per_unit"]))))


def generate(cfg: dict, seed: int, radius: float | None = None):
    """Source and target measures on the data ball for the configured generator."""
    g = cfg["generator"]
    kind = g["kind"]
    if radius is None:
        radius = WINDOW_FACTOR.get(cfg["experiment"], 1.0) * float(cfg["geometry"]["Rbar"])
    ball = Ball((0.0, 0.0), radius)
    if kind == "poisson":
        mu = sample_poisson_process(float(g["intensity"]), ball, seed)
        lam = normalize_to_mass(lebesgue_quadrature(ball, _cells(cfg, radius)), mu.total_mass)
    elif kind == "perturbed_lattice":
        a = float(g["spacing"])
        mu = perturbed_lattice(a, float(g["amplitude"]), ball, seed)
        z = lattice_sites(a, ball)
        A = np.asarray(g["strain"], float)
        y = z + np.asarray(g["drift"], float) + z @ A.T / radius
        lam = DiscreteMeasure(y, np.full(len(y), a * a), {"generator": "strained_lattice"})
    elif kind == "quadrature":
        mu = lebesgue_quadrature(ball, _cells(cfg, radius))
        lam = mu
    elif kind == "translated_quadrature":
        q = lebesgue_quadrature(ball, _cells(cfg, radius))
        h = 1.0 / float(cfg["solver"]["cells_per_unit"])
        phi = rng_stream(seed, "translation").uniform(0.0, 2 * np.pi)
        t = float(g["shift"]) * h * np.array([np.cos(phi), np.sin(phi)])
        mu = q.translated(t)
        mu.meta["translation"] = t.tolist()
        lam = q
    else:
        raise ValueError(f"unknown generator {kind!r}")
    return mu, lam


def _coupling(mu, lam, cfg):
    if mu is lam:
        return Coupling.identity(mu), None
    pi, rep = solve_exact(mu, lam, **_solver_kw(cfg))
    return pi, rep


def _base_report(cfg, seed):
    return {"config": copy.deepcopy(cfg), "seed": int(seed)}


# ---------------------------------------------------------------------------
# one-step harmonic approximation


_WINDOW_CACHE: OrderedDict = OrderedDict()
_WINDOW_CACHE_MAX = 8


def _window_coupling(meas, ball, cells, cfg, reverse=False):
    """Optimal coupling between kappa-Lebesgue on ``ball`` and the restriction (cost, kappa)."""
    key = (eu._fingerprint(meas), ball.radius, int(cells), bool(reverse), tuple(sorted(_solver_kw(cfg).items())))
    # least recently used eviction keeps a fixed target's window across a family of runs
    if key in _WINDOW_CACHE:
        _WINDOW_CACHE.move_to_end(key)
        return _WINDOW_CACHE[key]
    if len(_WINDOW_CACHE) >= _WINDOW_CACHE_MAX:
        _WINDOW_CACHE.popitem(last=False)
    _WINDOW_CACHE[key] = _window_coupling_uncached(meas, ball, cells, cfg, reverse)
    return _WINDOW_CACHE[key]


def _window_coupling_uncached(meas, ball, cells, cfg, reverse):
    sub, kappa = restrict(meas, ball)
    quad = lebesgue_quadrature(ball, cells)
    quad = DiscreteMeasure(quad.points, quad.weights * (sub.total_mass / quad.total_mass))
    if reverse:
        c, rep = solve_exact(sub, quad, **_solver_kw(cfg))
    else:
        c, rep = solve_exact(quad, sub, **_solver_kw(cfg))
    return c, rep.cost, kappa


def harmonic_experiment(cfg: dict, seed: int) -> dict:
    s = cfg["solver"]
    Rbar = float(cfg["geometry"]["Rbar"])
    W = 6.0 * Rbar
    ball = Ball((0.0, 0.0), W)
    mu, lam = generate(cfg, seed, W)
    pi, _ = _coupling(mu, lam, cfg)
    E = eu.local_energy(pi, Rbar)
    cells = _cells(cfg, W)
    pre, cost_mu, k_mu = _window_coupling(mu, ball, cells, cfg)
    if mu is lam:
        post = Coupling(pre.targets, pre.sources, pre.tgt, pre.src, pre.mass)
        cost_lam, k_lam = cost_mu, k_mu
    else:
        post, cost_lam, k_lam = _window_coupling(lam, ball, cells, cfg, reverse=True)
    D = (cost_mu / ball.area + Rbar**2 * (k_mu - 1) ** 2 / k_mu
         + cost_lam / ball.area + Rbar**2 * (k_lam - 1) ** 2 / k_lam)
    ens = eu.build_trajectories(pre, pi, post, partial=True)
    R, rep = eu.good_radius(ens, pi, mu, (3 * Rbar, 4 * Rbar), int(s["candidates"]), float(s["tau"]),
                            seed=seed, lam=lam, T=int(s["T"]), solver_kw=_solver_kw(cfg))
    fbar = eu.boundary_flux(pi, R, "raw").time_integrated()
    Phi = solve_neumann(None, fbar.density(int(s["n_theta"])), R, int(s["n_r"]), int(s["n_theta"]))
    x, y, m = pi.x, pi.y, pi.mass
    touch = (np.einsum("ij,ij->i", x, x) < Rbar**2) | (np.einsum("ij,ij->i", y, y) < Rbar**2)
    dev = x[touch] - y[touch] + Phi.gradient(x[touch])
    lhs = math.fsum(m[touch] * np.einsum("ij,ij->i", dev, dev)) / (math.pi * Rbar**2)
    probe = _disk_probe(2 * Rbar)
    g = Phi.gradient(probe)
    sup_grad = float(np.einsum("ij,ij->i", g, g).max())
    ED = E + D
    met = ED / Rbar**2 <= float(s["smallness_cap"])
    out = _base_report(cfg, seed)
    out.update(E=E, D=D, R=R, LHS=lhs, ratio=lhs / E if E > 0 else 0.0, sup_grad_sq=sup_grad,
               sup_grad_ratio=sup_grad / ED if ED > 0 else 0.0, kappa_mu=k_mu, kappa_lambda=k_lam,
               hypothesis_met=bool(met), flux_mass=fbar.total, n_pairs=int(pi.size),
               good_radius={"candidates": rep.candidates, "excluded": rep.excluded, "index": rep.index,
                            "records": [{"R": r["R"], "score": r["score"], "criteria": r["criteria"]}
                                        for r in rep.records]})
    if not met:
        out["flag"] = "hypothesis not met"
    return out


def _disk_probe(radius, n_r=24, n_theta=64):
    r = radius * (np.arange(n_r) + 0.5) / n_r
    th = 2 * np.pi * np.arange(n_theta) / n_theta
    R_, T_ = np.meshgrid(r, th, indexing="ij")
    return np.column_stack([(R_ * np.cos(T_)).ravel(), (R_ * np.sin(T_)).ravel()])


# ---------------------------------------------------------------------------
# restriction to balls


def restriction_experiment(cfg: dict, seed: int) -> dict:
    """Average over R in (3s, 4s) of the restricted distance, against the distance on B_{5s}."""
    s = float(cfg["geometry"]["Rbar"])
    n = int(cfg["solver"]["samples"])
    mu, _ = generate(cfg, seed, 6.0 * s)
    u = rng_stream(seed, "restriction_samples").uniform(size=n)
    radii = s * (3.0 + (np.arange(n) + u) / n)
    unit4 = s**4
    samples = []
    for R in radii:
        cost, kappa = wasserstein_sq_localized(mu, Ball((0.0, 0.0), R), _cells(cfg, R), **_solver_kw(cfg))
        val = cost / unit4 + (kappa - 1) ** 2 / kappa
        samples.append({"R": float(R), "w2": cost, "kappa": kappa, "value": val})
    num = math.fsum(v["value"] for v in samples) / n
    cost, kappa = wasserstein_sq_localized(mu, Ball((0.0, 0.0), 5 * s), _cells(cfg, 5 * s), **_solver_kw(cfg))
    D = cost / unit4 + (kappa - 1) ** 2 / kappa
    tiny = 1e-14
    out = _base_report(cfg, seed)
    out.update(numerator=num, D=D, ratio=(num / D) if D > tiny else None, samples=samples,
               translation=mu.meta.get("translation"))
    return out


# ---------------------------------------------------------------------------
# multiscale sweep


def campanato_params(cfg, seed):
    s = cfg["solver"]
    return ms.CampanatoParams(theta=float(s["theta"]), R_min=float(s["R_min"]), smallness_cap=float(s["smallness_cap"]),
                              candidates=int(s["candidates"]), tau=float(s["tau"]),
                              cells_per_unit=float(s["cells_per_unit"]), n_r=int(s["n_r"]),
                              n_theta=int(s["n_theta"]), T=int(s["T"]), seed=int(seed))


def multiscale_experiment(cfg: dict, seed: int, out_dir=None) -> dict:
    Rbar = float(cfg["geometry"]["Rbar"])
    mu, lam = generate(cfg, seed, Rbar)
    pi, _ = _coupling(mu, lam, cfg)
    beta = ms.RateFunction.from_dict(cfg["beta"])
    run = ms.run_campanato(pi, mu, Rbar, beta, campanato_params(cfg, seed), _solver_kw(cfg))
    levels = ms.level_table(run)
    diags = ms.diagnostics_table(run)
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        from ..measures import write_csv
        write_csv(d / f"levels_seed{seed}.csv", ms.LEVEL_COLUMNS, levels)
        write_csv(d / f"diagnostics_seed{seed}.csv", ms.DIAG_COLUMNS, diags)
    out = _base_report(cfg, seed)
    bvals = [run.beta(lv.R) for lv in run.levels]
    e_over_b = [lv.E / b for lv, b in zip(run.levels, bvals)]
    b_over_b = [float(lv.b @ lv.b) / b for lv, b in zip(run.levels, bvals)]
    norm = diags[:, ms.DIAG_COLUMNS.index("e_weak1_normalized")] if len(diags) else np.zeros(0)
    out.update(stop_reason=run.stop_reason, C_beta=run.beta.C_beta,
               levels=[dict(zip(ms.LEVEL_COLUMNS, map(float, row))) for row in levels],
               diagnostics=[dict(zip(ms.DIAG_COLUMNS, map(float, row))) for row in diags],
               E_over_beta=e_over_b, b_sq_over_beta=b_over_b,
               E_spread=(max(e_over_b) / min(e_over_b)) if e_over_b and min(e_over_b) > 0 else None,
               e_weak1_max_over_median=(float(norm.max() / np.median(norm)) if len(norm) and np.median(norm) > 0
                                        else None))
    return out


def merged_fits(reports):
    """Power-law fits of the normalized weak and raw strong errors over all seeds."""
    R = [d["R"] for r in reports for d in r["diagnostics"]]
    ew = [d["e_weak1_normalized"] for r in reports for d in r["diagnostics"]]
    es = [d["e_strong"] for r in reports for d in r["diagnostics"]]
    scale = [d["R"] * (d["beta_over_R"] / d["R"]) ** 0.25 for r in reports for d in r["diagnostics"]]
    fits = {}
    try:
        fits["e_weak1_normalized_vs_R"] = fit_scaling(R, ew, "R", "e_weak1*R/beta").to_dict()
    except ValueError as exc:
        fits["e_weak1_normalized_vs_R"] = {"error": str(exc)}
    try:
        fits["e_strong_vs_scale"] = fit_scaling(scale, es, "R*(beta/R^2)^(1/4)", "e_strong").to_dict()
    except ValueError as exc:
        fits["e_strong_vs_scale"] = {"error": str(exc)}
    return fits


def worker_count(n_jobs: int) -> int:
    try:
        cap = int(os.environ.get("OTLINLAB_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, n_jobs))


def run_seeds(fn, cfg, seeds, **kw):
    """Run ``fn(cfg, seed)`` for every seed; results ordered by seed, failures recorded per seed."""
    seeds = sorted(seeds)
    n = worker_count(len(seeds))

    def safe(seed):
        try:
            return fn(cfg, seed, **kw)
        except Exception as exc:  # noqa: BLE001 - per-seed failures are reported, not raised
            return {"seed": int(seed), "error": f"{type(exc).__name__}: {exc}"}

    if n == 1:
        return [safe(s) for s in seeds]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=n) as pool:
        futs = {s: pool.submit(_safe_call, fn, cfg, s, kw) for s in seeds}
        return [futs[s].result() for s in seeds]


def _safe_call(fn, cfg, seed, kw):
    try:
        return fn(cfg, seed, **kw)
    except Exception as exc:  # noqa: BLE001
        return {"seed": int(seed), "error": f"{type(exc).__name__}: {exc}"}


def harmonic_family(cfg: dict, amplitudes, seeds=None) -> dict:
    """Run the one-step experiment over amplitudes and seeds and vote on the trend.

    Amplitudes are walked from large to small; for each adjacent pair a' > a a
    seed votes "yes" when the ratio at a does not exceed the ratio at a'.  A
    pair passes on a strict majority.
    """
    seeds = sorted(seeds if seeds is not None else cfg["seeds"])
    amps = sorted(float(a) for a in amplitudes)
    table = {}
    for a in amps:
        c = copy.deepcopy(cfg)
        c["generator"]["amplitude"] = a
        table[a] = {r["seed"]: r for r in run_seeds(harmonic_experiment, c, seeds)}
    ratios = {a: [table[a][s].get("ratio") for s in seeds] for a in amps}
    finite = all(r is not None and np.isfinite(r) for a in amps for r in ratios[a])
    pairs = []
    for lo, hi in zip(amps[:-1], amps[1:]):
        votes = [bool(r_lo <= r_hi) for r_lo, r_hi in zip(ratios[lo], ratios[hi])
                 if r_lo is not None and r_hi is not None]
        pairs.append({"amplitudes": [lo, hi], "votes": votes, "passed": sum(votes) * 2 > len(seeds)})
    return {"config": copy.deepcopy(cfg), "amplitudes": amps, "seeds": seeds, "ratios": ratios,
            "finite": finite, "pairs": pairs, "passed": finite and all(p["passed"] for p in pairs),
            "reports": {str(a): [table[a][s] for s in seeds] for a in amps}}
