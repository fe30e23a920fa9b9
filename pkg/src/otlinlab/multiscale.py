"""Multiscale re-centering of a coupling by harmonic shifts.

Starting from an optimal coupling between data mu and (a quadrature of)
Lebesgue measure, each level picks a good radius R_k, solves a Neumann
problem with the boundary crossings of the current coupling as flux data,
and re-centres the targets by the gradient of that solution at the origin.
The accumulated shifts are then compared with the mollified gradient of the
macroscopic Poisson solution.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import eulerian as eu
from .measures import Ball, DiscreteMeasure, Mollifier, lebesgue_quadrature, restrict, write_csv
from .poisson import (NeumannPoissonField, ball_average_gradient, boundary_moment, gradient_at_origin,
                      mollified_gradient_average, solve_neumann)
from .transport import Coupling, solve_exact

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# rate functions


@dataclass(frozen=True)
class RateFunction:
    """beta(R) = R^alpha (kind 'power') or log(R + offset) (kind 'log')."""

    kind: str = "log"
    alpha: float = 0.0
    offset: float = math.e
    C_beta: float | None = None

    def __post_init__(self):
        if self.kind not in ("power", "log"):
            raise ValueError("kind is 'power' or 'log'")
        if self.kind == "log" and self.offset < 1:
            raise ValueError("log offset must be at least 1")
        if self.kind == "power" and self.alpha < 0:
            raise ValueError("alpha must be nonnegative")

    def __call__(self, R):
        R = np.asarray(R, float)
        out = R**self.alpha if self.kind == "power" else np.log(R + self.offset)
        return float(out) if out.ndim == 0 else out

    def to_dict(self):
        return {"kind": self.kind, "alpha": self.alpha, "offset": self.offset, "C_beta": self.C_beta}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("kind", "log"), float(d.get("alpha", 0.0)), float(d.get("offset", math.e)),
                   d.get("C_beta"))


def rate_function_check(beta: RateFunction, R: float, levels: int) -> dict:
    """Dyadic-sum ratio sum_l beta(2^l R)/(2^l R) / (beta(R)/R) and shape verdicts."""
    if R < 1 or levels < 1:
        raise ValueError("need R >= 1 and at least one level")
    rs = R * 2.0 ** np.arange(levels + 1)
    b = np.asarray(beta(rs), float)
    terms = b / rs
    ratio = math.fsum(terms) / terms[0]
    increasing = bool(np.all(np.diff(b) >= 0))
    decreasing = bool(np.all(np.diff(terms) < 0))
    # summable tail needs the dyadic summands to shrink by a fixed factor
    contraction = float(np.max(terms[1:] / terms[:-1]))
    ok = increasing and decreasing and contraction < 1 - 1e-12
    return {"ratio": ratio, "increasing": increasing, "beta_over_R_decreasing": decreasing,
            "contraction": contraction, "verdict": "ok" if ok else "violates rate hypothesis"}


def certify_rate(beta: RateFunction, radii, levels: int = 40) -> RateFunction:
    """Copy of ``beta`` carrying the largest dyadic-sum ratio over ``radii``."""
    c = max(rate_function_check(beta, max(1.0, float(r)), levels)["ratio"] for r in radii)
    return RateFunction(beta.kind, beta.alpha, beta.offset, c)


# ---------------------------------------------------------------------------
# the iteration


@dataclass
class CampanatoParams:
    theta: float = 0.5
    R_min: float = 4.0
    smallness_cap: float = 0.1
    candidates: int = 8
    tau: float = eu.TAU_DEFAULT
    cells_per_unit: float = 1.0  # quadrature cells per unit length
    n_r: int = 256
    n_theta: int = 256
    T: int = 2
    seed: int = 0
    max_levels: int = 32

    def cells(self, radius):
        return max(8, int(round(2 * radius * self.cells_per_unit)))


@dataclass
class ScaleLadder:
    Rbar0: float
    theta: float
    Rbar: list = field(default_factory=list)
    R: list = field(default_factory=list)

    @property
    def count(self):
        return len(self.R)

    def nesting(self) -> list:
        """R_{k-1} / R_k for consecutive levels (at least 2 is the nested regime)."""
        return [a / b for a, b in zip(self.R[:-1], self.R[1:])]


@dataclass
class Level:
    k: int
    Rbar: float
    R: float
    coupling: Coupling  # pi_k
    Phi: NeumannPoissonField
    u: NeumannPoissonField
    v: NeumannPoissonField
    b: np.ndarray
    h_before: np.ndarray  # sum of shifts of earlier levels
    E: float
    D: float
    kappa: float
    radius_report: eu.GoodRadiusReport | None = None
    flux_total: float = 0.0


@dataclass
class MultiscaleRun:
    ladder: ScaleLadder
    levels: list
    mu: DiscreteMeasure
    beta: RateFunction
    params: CampanatoParams
    stop_reason: str = ""
    log: list = field(default_factory=list)

    @property
    def K(self):
        return len(self.levels) - 1

    @property
    def u0(self) -> NeumannPoissonField:
        return self.levels[0].u

    def h(self, k) -> np.ndarray:
        """Cumulative shift through level k."""
        return self.levels[k].h_before + self.levels[k].b

    def level_for(self, R: float) -> int:
        """Level k with R in [R_{k+1}, R_k] (the last level below R_K)."""
        for lv in self.levels[1:]:
            if R >= lv.R:
                return lv.k - 1
        return self.K

    def unshifted(self, k) -> Coupling:
        return self.levels[k].coupling.shifted_targets(-self.levels[k].h_before)


def _pre_coupling(mu, Rw, cells, solver_kw):
    """Optimal coupling from kappa-Lebesgue on B_Rw to mu restricted there."""
    ball = Ball((0.0, 0.0), Rw)
    sub, kappa = restrict(mu, ball)
    if sub.is_empty:
        return None, 0.0, kappa
    quad = lebesgue_quadrature(ball, cells)
    quad = DiscreteMeasure(quad.points, quad.weights * (sub.total_mass / quad.total_mass))
    pre, rep = solve_exact(quad, sub, **solver_kw)
    return pre, rep.cost, kappa


def run_campanato(coupling: Coupling, mu: DiscreteMeasure, Rbar: float, beta: RateFunction,
                  params: CampanatoParams | None = None, solver_kw=None) -> MultiscaleRun:
    """Iterate good radius, harmonic shift and re-centring down the scales."""
    params = params or CampanatoParams()
    solver_kw = dict(solver_kw or {})
    ladder = ScaleLadder(Rbar / 6.0, params.theta)
    run = MultiscaleRun(ladder, [], mu, beta, params)
    h = np.zeros(2)
    b_prev = None
    pi = coupling
    for k in range(params.max_levels):
        Rb = ladder.Rbar0 * params.theta**k
        W = 6.0 * Rb
        pi_k = coupling.shifted_targets(h) if k else coupling
        E = eu.local_energy(pi_k, Rb)
        pre, pre_cost, kappa = _pre_coupling(mu, W, params.cells(W), solver_kw)
        D = pre_cost / (math.pi * W * W) + (Rb * Rb * (kappa - 1) ** 2 / kappa if kappa > 0 else 0.0)
        ens = eu.build_trajectories(pre, pi_k, None, partial=True)
        window = (3.0 * Rb, 4.0 * Rb)
        try:
            R, rep = eu.good_radius(ens, pi_k, mu, window, params.candidates, params.tau,
                                    seed=params.seed + 7919 * k, shift=b_prev, T=params.T,
                                    cells=None, solver_kw=solver_kw)
        except ValueError as exc:
            run.stop_reason = f"good radius failed at level {k}: {exc}"
            log.warning(run.stop_reason)
            break
        fbar = eu.boundary_flux(pi_k, R, "raw").time_integrated()
        dens = fbar.density(params.n_theta)
        Phi = solve_neumann(None, dens, R, params.n_r, params.n_theta)
        u = solve_neumann(mu, dens, R, params.n_r, params.n_theta, subtract_one=True)
        v = solve_neumann(mu, None, R, params.n_r, params.n_theta, subtract_one=True)
        b = gradient_at_origin(Phi)
        run.levels.append(Level(k, Rb, R, pi_k, Phi, u, v, b, h.copy(), E, D, kappa, rep, fbar.total))
        ladder.Rbar.append(Rb)
        ladder.R.append(R)
        run.log.append({"k": k, "Rbar": Rb, "R": R, "E": E, "D": D, "b": b.tolist()})
        log.info("level %d: R=%.4g E=%.4g D=%.4g |b|=%.3g", k, R, E, D, float(np.hypot(*b)))
        h = h + b
        b_prev = b
        if Rb <= params.R_min:
            run.stop_reason = "reached R_min"
            break
        if (E + D) / (R * R) > params.smallness_cap:
            run.stop_reason = f"smallness cap exceeded at level {k}"
            log.warning(run.stop_reason)
            break
    else:
        run.stop_reason = "max_levels"
    run.beta = certify_rate(beta, [max(1.0, r) for r in ladder.R]) if ladder.R else beta
    return run


# ---------------------------------------------------------------------------
# residuals of the flux representations


def _norm(v):
    return float(np.hypot(v[0], v[1]))


def cumulative_shift_representation(run: MultiscaleRun, k: int, R: float) -> dict:
    """Compare accumulated shifts with boundary moments and mollified gradients of the macroscopic field."""
    if not run.levels or k > run.K:
        raise ValueError("level not available in run")
    lv = run.levels[k]
    u0 = run.u0
    beta = run.beta
    eta = Mollifier(R)
    g0 = mollified_gradient_average(u0, eta)
    r1 = _norm(run.h(k) - boundary_moment(u0, lv.R if lv.R < u0.radius else None))
    r2 = _norm(lv.h_before + mollified_gradient_average(lv.u, eta) - g0)
    r3 = _norm(g0 - boundary_moment(u0, R if R < u0.radius else None))
    s = beta(lv.R) / lv.R
    return {"k": k, "R": R, "r1": r1, "r2": r2, "r3": r3, "r1_normalized": r1 / s, "r2_normalized": r2 / s,
            "r3_normalized": r3 / math.sqrt(beta(R))}


def _ball_flux(coupling: Coupling, R: float) -> np.ndarray:
    """int_{B_R} dj-bar and the time-integrated mass in B_R."""
    x, y, m = coupling.x, coupling.y, coupling.mass
    tin = eu.time_inside(x, y, R)
    return (m * tin) @ (y - x), float(m @ tin)


def additivity_residual(run: MultiscaleRun, k: int) -> float:
    """Ball average over B_{R_k} of j_k + b_{k-1} - j_{k-1}, with b_{k-1} carried by the moving mass."""
    if k < 1:
        raise ValueError("k must be at least 1")
    lv, prev = run.levels[k], run.levels[k - 1]
    jk, mk = _ball_flux(lv.coupling, lv.R)
    jp, _ = _ball_flux(prev.coupling, lv.R)
    return _norm((jk + prev.b * mk - jp) / (math.pi * lv.R**2))


def flux_linearization_residual(run: MultiscaleRun, k: int, R: float) -> dict:
    """Mollified and ball-averaged differences between the flux of pi_k and grad u_k."""
    lv = run.levels[k]
    eta = Mollifier(R)
    weak = _norm(eu.mollified_flux(lv.coupling, eta) - mollified_gradient_average(lv.u, eta))
    rb = run.levels[k + 1].R if k < run.K else run.params.theta * lv.R
    jb = eu.ball_average_flux(lv.coupling, rb)
    ball = _norm(jb - ball_average_gradient(lv.u, rb))
    s = lv.E / lv.R if lv.E > 0 else 1.0
    return {"k": k, "R": R, "weak": weak, "ball": ball, "weak_normalized": weak / s, "ball_normalized": ball / s}


def error_diagnostics(run: MultiscaleRun, R: float, eta: Mollifier | None = None) -> dict:
    """Weak and strong closeness of the displacement of the original coupling to h_R."""
    eta = eta or Mollifier(R)
    pi0 = run.levels[0].coupling
    h = mollified_gradient_average(run.u0, eta)
    out = coupling_errors(pi0, h, eta)
    beta = run.beta(R)
    out.update(R=R, hx=float(h[0]), hy=float(h[1]), beta=beta, beta_over_R=beta / R,
               e_weak1_normalized=out["e_weak1"] * R / beta, e_weak2_normalized=out["e_weak2"] * R / beta,
               e_strong_normalized=out["e_strong"] / (R * (beta / R**2) ** 0.25),
               window_energy_normalized=out["window_energy"] / beta)
    # auxiliary terms at the level whose scale contains R
    k = run.level_for(R)
    lv = run.levels[k]
    S = float(pi0.mass @ eta(pi0.x))
    jk = eu.mollified_flux(lv.coupling, eta)
    lag = (lv.coupling.mass * eta(lv.coupling.x)) @ (lv.coupling.y - lv.coupling.x)
    gk = mollified_gradient_average(lv.u, eta)
    A = lag - jk
    B = jk - gk
    C = lv.h_before + gk - h
    tail = (lv.h_before - h) * (S - 1.0)
    out.update(k=k, mass_defect=abs(S - 1.0), gradient_average=_norm(gk), lagrangian_vs_flux=_norm(A),
               flux_vs_gradient=_norm(B), shift_vs_gradient=_norm(C),
               decomposition_defect=_norm(out["weak1_vector"] - (A + B + C + tail)),
               triangle_bound=_norm(A) + _norm(B) + _norm(C) + _norm(lv.h_before - h) * abs(S - 1.0))
    return out


def coupling_errors(coupling: Coupling, h, eta: Mollifier) -> dict:
    """e_weak1/2, e_strong and the windowed quadratic deviation from the shift h."""
    h = np.asarray(h, float)
    R = eta.radius
    x, y, m = coupling.x, coupling.y, coupling.mass
    w = m * eta(x)
    dev = y - x - h
    v1 = w @ dev
    v2 = (m * eta(y - h)) @ dev
    touch = (np.einsum("ij,ij->i", x, x) < R * R) | (np.einsum("ij,ij->i", y - h, y - h) < R * R)
    strong = float(np.sqrt(np.einsum("ij,ij->i", dev[touch], dev[touch]).max())) if touch.any() else 0.0
    t2 = (np.einsum("ij,ij->i", x, x) < 4 * R * R) | (np.einsum("ij,ij->i", y - h, y - h) < 4 * R * R)
    window_energy = math.fsum(m[t2] * np.einsum("ij,ij->i", dev[t2], dev[t2])) / (math.pi * 4 * R * R)
    return {"e_weak1": _norm(v1), "e_weak2": _norm(v2), "e_strong": strong, "window_energy": window_energy, "weak1_vector": v1}


def diagnostic_radii(run: MultiscaleRun, ratio: float = math.sqrt(2.0)) -> list:
    """Geometric radii from R_0 down to R_K."""
    hi, lo = run.levels[0].R, run.levels[-1].R
    n = int(math.floor(math.log(hi / lo) / math.log(ratio) + 1e-9))
    return [hi / ratio**j for j in range(n + 1)]


# ---------------------------------------------------------------------------
# export


LEVEL_COLUMNS = ["k", "Rk", "Ek", "Dk", "bx", "by", "hx", "hy", "res_shift", "res_additivity", "res_flux_weak", "res_flux_ball"]
DIAG_COLUMNS = ["R", "e_weak1", "e_weak2", "e_strong", "beta_over_R", "e_weak1_normalized", "e_weak2_normalized",
                "e_strong_normalized", "window_energy_normalized"]


def level_table(run: MultiscaleRun) -> np.ndarray:
    rows = []
    for lv in run.levels:
        hk = run.h(lv.k)
        cs = cumulative_shift_representation(run, lv.k, lv.R)
        add = additivity_residual(run, lv.k) if lv.k >= 1 else 0.0
        fl = flux_linearization_residual(run, lv.k, lv.R)
        rows.append([lv.k, lv.R, lv.E, lv.D, lv.b[0], lv.b[1], hk[0], hk[1], cs["r1"], add, fl["weak"], fl["ball"]])
    return np.array(rows, float).reshape(-1, len(LEVEL_COLUMNS))


def diagnostics_table(run: MultiscaleRun, radii=None) -> np.ndarray:
    radii = diagnostic_radii(run) if radii is None else radii
    rows = []
    for R in radii:
        d = error_diagnostics(run, R)
        rows.append([d[c] for c in DIAG_COLUMNS])
    return np.array(rows, float).reshape(-1, len(DIAG_COLUMNS))


def export_run(run: MultiscaleRun, level_path, diag_path, radii=None):
    write_csv(level_path, LEVEL_COLUMNS, level_table(run))
    write_csv(diag_path, DIAG_COLUMNS, diagnostics_table(run, radii))
