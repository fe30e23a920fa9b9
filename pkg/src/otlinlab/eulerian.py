"""Eulerian quantities of straight-line couplings.

A coupling is read as a family of trajectories X(t) = (1-t)x + ty on [0,1].
Gluing with a coupling from the Lebesgue quadrature into the source and a
coupling from the target to a quadrature extends every trajectory to
[-1, 2], which is what the regularized boundary fluxes need.  Everything here
is computed by exact segment geometry; no time stepping is involved.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .measures import Ball, DiscreteMeasure, Mollifier, restrict, rng_stream, write_csv
from .poisson import bin_angles
from .transport import Coupling, circle_wasserstein_sq, wasserstein_sq_localized

TAU_DEFAULT = 0.05
N_BINS = 512
TIMES = (-1.0, 0.0, 1.0, 2.0)


class GluingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectoryEnsemble:
    """Weighted piecewise-affine paths through anchors at t = -1, 0, 1, 2."""

    anchors: np.ndarray  # (n, 4, 2)
    mass: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, float).reshape(-1, 4, 2)
        self.mass = np.asarray(self.mass, float)

    @property
    def size(self):
        return len(self.mass)

    @property
    def total_mass(self):
        return float(self.mass.sum())

    @property
    def x(self):
        return self.anchors[:, 1]

    @property
    def y(self):
        return self.anchors[:, 2]

    def position(self, t: float) -> np.ndarray:
        if not -1.0 <= t <= 2.0:
            raise ValueError("time outside [-1, 2]")
        k = min(int(math.floor(t + 1.0)), 2)
        s = t - TIMES[k]
        return (1.0 - s) * self.anchors[:, k] + s * self.anchors[:, k + 1]

    def marginal(self, t: float) -> DiscreteMeasure:
        return DiscreteMeasure(self.position(t), self.mass.copy())

    def main_coupling(self) -> Coupling:
        return Coupling.from_pairs(self.x, self.y, self.mass)


def _match(points, support, tol):
    """Index of each point in ``support`` (or -1 when absent)."""
    if len(support) == 0:
        return np.full(len(points), -1, np.int64)
    d, idx = cKDTree(support).query(points)
    idx = np.asarray(idx, np.int64)
    idx[d > tol] = -1
    return idx


def _groups(keys, n_keys):
    order = np.argsort(keys, kind="stable")
    counts = np.bincount(keys, minlength=n_keys)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return order, starts, counts


def _side(points, weights, other: Coupling | None, use_targets, tol_pos, tol_mass, partial, label):
    """For each support point: the pair indices of ``other`` that glue onto it."""
    n = len(points)
    if other is None:
        return None, np.zeros(n, np.int64), np.zeros(n, np.int64), None
    supp = other.targets if use_targets else other.sources
    ref = other.tgt if use_targets else other.src
    wts = other.target_weights() if use_targets else other.source_weights()
    hit = _match(points, supp, tol_pos)
    for i in range(n):
        j = hit[i]
        have = wts[j] if j >= 0 else 0.0
        if j < 0 and partial:
            continue
        if abs(have - weights[i]) > tol_mass:
            p = points[i]
            raise GluingError(f"{label} marginal mismatch at point ({p[0]:.17g}, {p[1]:.17g}): "
                              f"{have:.17g} vs {weights[i]:.17g}")
    # pairs of `other` grouped by the local point they attach to
    inv = np.full(len(supp), -1, np.int64)
    inv[hit[hit >= 0]] = np.nonzero(hit >= 0)[0]
    local = inv[ref]
    ok = local >= 0
    pair_ids = np.nonzero(ok)[0]
    order, starts, counts = _groups(local[ok], n)
    return pair_ids[order], starts, counts, wts[np.maximum(hit, 0)] * (hit >= 0)


def _expand(rows_key, starts, counts):
    """Repeat each row once per member of its key's group (at least once)."""
    c = np.maximum(counts[rows_key], 1)
    rows = np.repeat(np.arange(len(rows_key)), c)
    offs = np.arange(len(rows)) - np.repeat(np.cumsum(c) - c, c)
    member = np.where(counts[rows_key][rows] > 0, starts[rows_key][rows] + offs, -1)
    return rows, member


def build_trajectories(pre: Coupling | None, main: Coupling, post: Coupling | None, *,
                       tol: float = 1e-9, partial: bool = False) -> TrajectoryEnsemble:
    """Glue ``pre`` (quadrature to mu), ``main`` (mu to lambda), ``post`` (lambda to quadrature).

    Each main pair is split over the pre pairs ending at its source and the
    post pairs starting at its target, proportionally to their masses.  A
    missing side (None, or with ``partial`` an atom the side does not cover)
    keeps the trajectory at rest on that time interval.
    """
    w_src, w_tgt = main.source_weights(), main.target_weights()
    scale = max(1.0, float(np.abs(np.concatenate([main.sources.ravel(), main.targets.ravel()])).max(initial=0.0)))
    tol_pos = tol * scale
    tol_mass = tol * max(1.0, float(w_src.max(initial=0.0)))
    pre_ids, pre_start, pre_cnt, pre_tot = _side(main.sources, w_src, pre, True, tol_pos, tol_mass, partial, "source")
    post_ids, post_start, post_cnt, post_tot = _side(main.targets, w_tgt, post, False, tol_pos, tol_mass, partial, "target")

    rows, mem = _expand(main.src, pre_start, pre_cnt)
    x = main.x[rows]
    y = main.y[rows]
    m = main.mass[rows].copy()
    xm1 = x.copy()
    has = mem >= 0
    if has.any():
        pid = pre_ids[mem[has]]
        xm1[has] = pre.sources[pre.src[pid]]
        m[has] *= pre.mass[pid] / pre_tot[main.src[rows[has]]]
    tgt_rows = main.tgt[rows]
    rows2, mem2 = _expand(tgt_rows, post_start, post_cnt)
    x, y, m, xm1 = x[rows2], y[rows2], m[rows2], xm1[rows2]
    x2 = y.copy()
    has = mem2 >= 0
    if has.any():
        qid = post_ids[mem2[has]]
        x2[has] = post.targets[post.tgt[qid]]
        m[has] *= post.mass[qid] / post_tot[tgt_rows[rows2[has]]]
    anchors = np.stack([xm1, x, y, x2], axis=1)
    meta = {"glued": [name for name, c in (("pre", pre), ("main", main), ("post", post)) if c is not None],
            "partial": bool(partial)}
    return TrajectoryEnsemble(anchors, m, meta)


# ---------------------------------------------------------------------------
# crossing geometry


def crossing_interval(x, y, R):
    """Vectorised entry/exit times of segments into the open ball B_R.

    Returns ``(t_minus, t_plus, hit)``; where ``hit`` is false the times are nan.
    """
    x = np.asarray(x, float).reshape(-1, 2)
    y = np.asarray(y, float).reshape(-1, 2)
    d = y - x
    a = np.einsum("ij,ij->i", d, d)
    b = np.einsum("ij,ij->i", x, d)
    c = np.einsum("ij,ij->i", x, x) - R * R
    tm = np.full(len(x), np.nan)
    tp = np.full(len(x), np.nan)
    still = a == 0.0
    inside0 = still & (c < 0)
    tm[inside0], tp[inside0] = 0.0, 1.0
    mv = ~still
    disc = b * b - a * c
    ok = mv & (disc > 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    # stable roots of a t^2 + 2 b t + c
    q = -(b + np.copysign(sq, b))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(q != 0, q / a, 0.0)
        r2 = np.where(q != 0, c / q, 0.0)
    lo = np.minimum(r1, r2)
    hi = np.maximum(r1, r2)
    lo = np.maximum(lo, 0.0)
    hi = np.minimum(hi, 1.0)
    good = ok & (lo < hi)
    tm[good], tp[good] = lo[good], hi[good]
    hit = inside0 | good
    return tm, tp, hit


def crossing_times(x, y, R: float):
    """(t_minus, t_plus) for a single segment, or None when it never enters the open ball."""
    if R <= 0:
        raise ValueError("R must be positive")
    tm, tp, hit = crossing_interval(np.asarray(x, float)[None], np.asarray(y, float)[None], R)
    if not hit[0]:
        return None
    return float(tm[0]), float(tp[0])


def time_inside(x, y, R) -> np.ndarray:
    tm, tp, hit = crossing_interval(x, y, R)
    return np.where(hit, tp - tm, 0.0)


# ---------------------------------------------------------------------------
# boundary fluxes


FLUX_KINDS = ("raw", "reduced", "time_integrated", "reduced_time_integrated", "regularized", "reduced_regularized")


@dataclass
class BoundaryFlux:
    """Signed atoms on the circle of radius R: exits positive, entries negative."""

    radius: float
    theta: np.ndarray
    t: np.ndarray
    m: np.ndarray
    kind: str = "raw"

    def __post_init__(self):
        self.theta = np.asarray(self.theta, float)
        self.t = np.asarray(self.t, float)
        self.m = np.asarray(self.m, float)
        if self.kind not in FLUX_KINDS:
            raise ValueError(f"unknown flux kind {self.kind!r}")

    @property
    def size(self):
        return len(self.m)

    @property
    def total(self):
        return float(self.m.sum())

    def part(self, sign: int) -> "BoundaryFlux":
        """Positive part (sign=+1) or the negative part as positive masses (sign=-1)."""
        keep = self.m > 0 if sign > 0 else self.m < 0
        return BoundaryFlux(self.radius, self.theta[keep], self.t[keep], np.abs(self.m[keep]), self.kind)

    def time_integrated(self) -> "BoundaryFlux":
        kind = "reduced_time_integrated" if self.kind.startswith("reduced") else "time_integrated"
        return BoundaryFlux(self.radius, self.theta, self.t, self.m, kind)

    def histogram(self, n_bins: int = N_BINS) -> np.ndarray:
        """Mass per angular bin (bin j centred at 2 pi j / n)."""
        return bin_angles(self.theta, self.m, n_bins, self.radius) * (self.radius * 2 * np.pi / n_bins)

    def density(self, n_bins: int = N_BINS) -> np.ndarray:
        """Density per unit arc length on the angular grid."""
        return bin_angles(self.theta, self.m, n_bins, self.radius)

    def l2_sq(self, n_bins: int = N_BINS) -> float:
        g = self.density(n_bins)
        return float(np.sum(g * g) * self.radius * 2 * np.pi / n_bins)

    def points(self):
        return self.radius * np.column_stack([np.cos(self.theta), np.sin(self.theta)])

    def to_csv(self, path):
        # kind is written as its index in FLUX_KINDS to keep the file numeric
        k = np.full(self.size, FLUX_KINDS.index(self.kind), float)
        write_csv(path, ["theta", "t", "m", "kind"], np.column_stack([self.theta, self.t, self.m, k]))


def _segments(obj):
    if isinstance(obj, TrajectoryEnsemble):
        return obj.x, obj.y, obj.mass
    return obj.x, obj.y, obj.mass


def crossing_sets(x, y, R, tau=None):
    """Exit/entry sets on [0,1] and, if ``tau`` is given, their reduced versions."""
    tm, tp, hit = crossing_interval(x, y, R)
    ry = np.hypot(y[:, 0], y[:, 1])
    rx = np.hypot(x[:, 0], x[:, 1])
    plus = hit & (ry >= R)
    minus = hit & (rx >= R)
    out = {"t_minus": tm, "t_plus": tp, "hit": hit, "plus": plus, "minus": minus}
    if tau is not None:
        bad = (plus & (tp <= 3 * tau)) | (minus & (tm >= 1 - 3 * tau))
        out["plus"] = plus & ~bad
        out["minus"] = minus & ~bad
        out["exceptional"] = bad
    return out


def _angle(p):
    return np.arctan2(p[:, 1], p[:, 0])


def boundary_flux(ensemble, R: float, variant: str = "raw", tau: float = TAU_DEFAULT) -> BoundaryFlux:
    """Crossing atoms (angle of X(t+-), t+-, +-m); ``variant`` is 'raw' or 'reduced'."""
    if variant not in ("raw", "reduced"):
        raise ValueError("variant is 'raw' or 'reduced'")
    x, y, m = _segments(ensemble)
    s = crossing_sets(x, y, R, tau if variant == "reduced" else None)
    P, N = s["plus"], s["minus"]
    tp, tm = s["t_plus"][P], s["t_minus"][N]
    xp = (1 - tp)[:, None] * x[P] + tp[:, None] * y[P]
    xn = (1 - tm)[:, None] * x[N] + tm[:, None] * y[N]
    theta = np.concatenate([_angle(xp), _angle(xn)])
    t = np.concatenate([tp, tm])
    mm = np.concatenate([m[P], -m[N]])
    return BoundaryFlux(R, theta, t, mm, variant)


def regularized_flux(ensemble: TrajectoryEnsemble, R: float, variant: str = "full",
                     tau: float = TAU_DEFAULT) -> BoundaryFlux:
    """Crossing mass carried radially onto the circle from X(-1) (exits) and X(2) (entries)."""
    if variant not in ("full", "reduced"):
        raise ValueError("variant is 'full' or 'reduced'")
    s = crossing_sets(ensemble.x, ensemble.y, R, tau if variant == "reduced" else None)
    P, N = s["plus"], s["minus"]
    a = ensemble.anchors[P, 0]
    b = ensemble.anchors[N, 3]
    if np.any((a[:, 0] == 0) & (a[:, 1] == 0)) or np.any((b[:, 0] == 0) & (b[:, 1] == 0)):
        raise ValueError("projection undefined: trajectory endpoint at the origin")
    theta = np.concatenate([_angle(a), _angle(b)])
    mm = np.concatenate([ensemble.mass[P], -ensemble.mass[N]])
    kind = "regularized" if variant == "full" else "reduced_regularized"
    return BoundaryFlux(R, theta, np.zeros(len(mm)), mm, kind)


def projection_inequality(flux: BoundaryFlux, n_bins: int = N_BINS):
    """Both sides of R^(1-d) (total mass)^2 <= 2 pi * int g^2 for a binned boundary density (d = 2)."""
    lhs = flux.total ** 2 / flux.radius
    rhs = 2 * np.pi * flux.l2_sq(n_bins)
    return float(lhs), float(rhs)


# ---------------------------------------------------------------------------
# energies and densities


def _touching(x, y, R):
    return (np.einsum("ij,ij->i", x, x) < R * R) | (np.einsum("ij,ij->i", y, y) < R * R)


def local_energy(coupling: Coupling, R: float) -> float:
    """Cost of pairs with an endpoint in B_{6R}, per unit area of B_{6R}."""
    x, y = coupling.x, coupling.y
    keep = _touching(x, y, 6 * R)
    d = x[keep] - y[keep]
    return math.fsum(coupling.mass[keep] * np.einsum("ij,ij->i", d, d)) / (np.pi * 36 * R * R)


def data_term(mu: DiscreteMeasure, R: float, cells: int, lam: DiscreteMeasure | None = None, **kw) -> float:
    """Squared distance of the data to Lebesgue on B_{6R}.

    With ``lam`` None this is the one-measure form W^2 / |B_{6R}|; otherwise
    the four-term form with the mass penalties R^2 (kappa - 1)^2 / kappa.
    """
    ball = Ball((0.0, 0.0), 6 * R)
    cost, kappa = wasserstein_sq_localized(mu, ball, cells, **kw)
    if lam is None:
        return cost / ball.area
    out = cost / ball.area + R * R * (kappa - 1) ** 2 / kappa
    cost2, kappa2 = wasserstein_sq_localized(lam, ball, cells, **kw)
    return out + cost2 / ball.area + R * R * (kappa2 - 1) ** 2 / kappa2


def localized_bb_energy(coupling: Coupling, R: float) -> float:
    """Sum of m |x - y|^2 times the time the segment spends in B_R."""
    x, y = coupling.x, coupling.y
    d = y - x
    return math.fsum(coupling.mass * np.einsum("ij,ij->i", d, d) * time_inside(x, y, R))


def time_integrated_density(coupling: Coupling, R: float, T: int) -> DiscreteMeasure:
    """Midpoint-rule samples of the time-integrated density, restricted to B_R."""
    if T < 2:
        raise ValueError("T must be at least 2")
    x, y, m = coupling.x, coupling.y, coupling.mass
    ts = (np.arange(T) + 0.5) / T
    pts = (1 - ts)[:, None, None] * x[None] + ts[:, None, None] * y[None]
    pts = pts.reshape(-1, 2)
    w = np.tile(m / T, T)
    keep = np.einsum("ij,ij->i", pts, pts) < R * R
    return DiscreteMeasure(pts[keep], w[keep])


_GL4 = np.polynomial.legendre.leggauss(4)


def _segment_quadrature(x, y, R, n=4):
    """Gauss nodes of each segment's inside interval: times (k, n), weights (k, n), and the mask."""
    tm, tp, hit = crossing_interval(x, y, R)
    g, w = np.polynomial.legendre.leggauss(n)
    tm, tp = np.where(hit, tm, 0.0), np.where(hit, tp, 0.0)
    half = 0.5 * (tp - tm)
    ts = (tm + half)[:, None] + half[:, None] * g[None, :]
    ws = half[:, None] * w[None, :]
    return ts, ws


def ball_average_flux(coupling: Coupling, R: float) -> np.ndarray:
    """(1/|B_R|) int_{B_R} of the time-integrated flux."""
    x, y, m = coupling.x, coupling.y, coupling.mass
    tin = time_inside(x, y, R)
    return (m * tin) @ (y - x) / (np.pi * R * R)


def mollified_flux(coupling: Coupling, eta: Mollifier, center=(0.0, 0.0)) -> np.ndarray:
    """int eta dj-bar, exact: eta along a segment is a polynomial of degree 6 in t."""
    c = np.asarray(center, float)
    x, y, m = coupling.x - c, coupling.y - c, coupling.mass
    tm, tp, hit = crossing_interval(x, y, eta.radius)
    if not hit.any():
        return np.zeros(2)
    x, y, m, tm, tp = x[hit], y[hit], m[hit], tm[hit], tp[hit]
    g, w = _GL4
    half = 0.5 * (tp - tm)
    ts = (tm + half)[:, None] + half[:, None] * g[None, :]
    pts = (1 - ts)[..., None] * x[:, None, :] + ts[..., None] * y[:, None, :]
    vals = eta.profile(np.hypot(pts[..., 0], pts[..., 1]))
    weight = m * (vals * (half[:, None] * w[None, :])).sum(axis=1)
    return weight @ (y - x)


# ---------------------------------------------------------------------------
# weak-form identities


SPATIAL_TESTS = {
    "1": (lambda p: np.ones(len(p)), lambda p: np.zeros_like(p)),
    "x1": (lambda p: p[:, 0], lambda p: np.column_stack([np.ones(len(p)), np.zeros(len(p))])),
    "x2": (lambda p: p[:, 1], lambda p: np.column_stack([np.zeros(len(p)), np.ones(len(p))])),
    "x1x2": (lambda p: p[:, 0] * p[:, 1], lambda p: np.column_stack([p[:, 1], p[:, 0]])),
    "|x|^2": (lambda p: np.einsum("ij,ij->i", p, p), lambda p: 2.0 * p),
}
TIME_POWERS = (0, 1, 2)


def polynomial_test_functions():
    """The 15 products of spatial monomials with 1, t, t^2, as (name, zeta, grad, dt)."""
    out = []
    for sname, (f, gf) in SPATIAL_TESTS.items():
        for q in TIME_POWERS:
            def zeta(p, t, f=f, q=q):
                return f(p) * t**q

            def grad(p, t, gf=gf, q=q):
                return gf(p) * (t**q)[:, None]

            def dt(p, t, f=f, q=q):
                return f(p) * (q * t ** (q - 1) if q else 0.0 * t)

            out.append((f"{sname}*t^{q}", zeta, grad, dt))
    return out


def weak_continuity_residual(coupling: Coupling, R: float, test) -> dict:
    """Bulk side (Gauss quadrature on inside intervals) against endpoint and boundary terms."""
    _, zeta, grad, dt = test
    x, y, m = coupling.x, coupling.y, coupling.mass
    ts, ws = _segment_quadrature(x, y, R, n=4)
    k, n = ts.shape
    tt = ts.ravel()
    pts = ((1 - ts)[..., None] * x[:, None, :] + ts[..., None] * y[:, None, :]).reshape(-1, 2)
    vel = np.repeat(y - x, n, axis=0)
    integrand = dt(pts, tt) + np.einsum("ij,ij->i", grad(pts, tt), vel)
    bulk = math.fsum(np.repeat(m, n) * ws.ravel() * integrand)
    parts = _endpoint_terms(x, y, m, R, lambda p, t: zeta(p, np.full(len(p), t) if np.isscalar(t) else t))
    rhs = math.fsum(parts)
    scale = max(math.fsum(np.abs(parts)), abs(bulk), 1e-300)
    return {"lhs": bulk, "rhs": rhs, "residual": abs(bulk - rhs) / scale}


def _endpoint_terms(x, y, m, R, zeta):
    """Terms of int_{B_R}(zeta_1 d lambda - zeta_0 d mu) + int zeta df, as a flat list."""
    R2 = R * R
    s = crossing_sets(x, y, R)
    inx = np.einsum("ij,ij->i", x, x) < R2
    iny = np.einsum("ij,ij->i", y, y) < R2
    P, N = s["plus"], s["minus"]
    tp, tm = s["t_plus"][P], s["t_minus"][N]
    xp = (1 - tp)[:, None] * x[P] + tp[:, None] * y[P]
    xn = (1 - tm)[:, None] * x[N] + tm[:, None] * y[N]
    return np.concatenate([
        m[iny] * zeta(y[iny], 1.0),
        -m[inx] * zeta(x[inx], 0.0),
        m[P] * zeta(xp, tp),
        -m[N] * zeta(xn, tm),
    ])


def divergence_identity_residual(coupling: Coupling, R: float, name: str) -> dict:
    """int_{B_R} grad zeta . dj-bar against -int zeta d(mu - lambda) + int zeta d f-bar."""
    f, gf = SPATIAL_TESTS[name]
    x, y, m = coupling.x, coupling.y, coupling.mass
    ts, ws = _segment_quadrature(x, y, R, n=2)
    k, n = ts.shape
    pts = ((1 - ts)[..., None] * x[:, None, :] + ts[..., None] * y[:, None, :]).reshape(-1, 2)
    vel = np.repeat(y - x, n, axis=0)
    bulk = math.fsum(np.repeat(m, n) * ws.ravel() * np.einsum("ij,ij->i", gf(pts), vel))
    parts = _endpoint_terms(x, y, m, R, lambda p, t: f(p))
    rhs = math.fsum(parts)
    scale = max(math.fsum(np.abs(parts)), abs(bulk), 1e-300)
    return {"lhs": bulk, "rhs": rhs, "residual": abs(bulk - rhs) / scale}


# ---------------------------------------------------------------------------
# scale diagnostics


@dataclass
class ScaleDiagnostics:
    R: float
    E: float
    D: float
    M: float
    mass_in_window: float

    def __post_init__(self):
        if self.E < 0 or self.D < 0:
            raise ValueError("E and D must be nonnegative")
        self.M = (self.E + self.D) ** 0.25

    def to_dict(self):
        return asdict(self)


def scale_diagnostics(coupling: Coupling, mu: DiscreteMeasure, R: float, cells: int,
                      lam: DiscreteMeasure | None = None, **kw) -> ScaleDiagnostics:
    E = local_energy(coupling, R)
    D = data_term(mu, R, cells, lam, **kw)
    mass = mass_touching(coupling, 6 * R)
    return ScaleDiagnostics(R, E, D, 0.0, mass)


def mass_touching(coupling: Coupling, R: float) -> float:
    """Mass of pairs with an endpoint in B_R."""
    return float(coupling.mass[_touching(coupling.x, coupling.y, R)].sum())


def displacement_fit(coupling: Coupling, R: float, M: float) -> float:
    """max |x - y| over pairs touching B_{5R}, in units of R M."""
    keep = _touching(coupling.x, coupling.y, 5 * R)
    if not keep.any() or M == 0:
        return 0.0
    d = coupling.x[keep] - coupling.y[keep]
    return float(np.sqrt(np.einsum("ij,ij->i", d, d).max()) / (R * M))


# ---------------------------------------------------------------------------
# good radius


CRITERIA = ("restriction", "density", "ghat_l2", "boundary_w2", "mass_crossing", "displacement_crossing",
            "shift_crossing")


_W2_CACHE: dict = {}
_W2_CACHE_MAX = 256


def _fingerprint(measure) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(np.ascontiguousarray(measure.points).tobytes())
    h.update(np.ascontiguousarray(measure.weights).tobytes())
    return h.hexdigest()


def _restricted_w2(measure, R, cells, kw):
    # pure in its arguments, so repeated measures (a fixed target family) are memoized
    key = (_fingerprint(measure), float(R), int(cells), tuple(sorted(kw.items())))
    if key in _W2_CACHE:
        return _W2_CACHE[key]
    sub, kappa = restrict(measure, Ball((0.0, 0.0), R))
    if sub.is_empty:
        out = (0.0, 0.0)
    else:
        out = wasserstein_sq_localized(measure, Ball((0.0, 0.0), R), cells, **kw)
    if len(_W2_CACHE) >= _W2_CACHE_MAX:
        _W2_CACHE.pop(next(iter(_W2_CACHE)))
    _W2_CACHE[key] = out
    return out


def _flux_w2(f: BoundaryFlux, g: BoundaryFlux, n_bins):
    if f.size == 0 and g.size == 0:
        return 0.0
    return circle_wasserstein_sq(f.histogram(n_bins), g.histogram(n_bins), radius=f.radius)


def _symmetric_time(x, y1, y2, R):
    """Measure of the times in [0,1] when exactly one of two segments from x is in B_R."""
    a0, a1, ha = crossing_interval(x, y1, R)
    b0, b1, hb = crossing_interval(x, y2, R)
    la = np.where(ha, a1 - a0, 0.0)
    lb = np.where(hb, b1 - b0, 0.0)
    both = ha & hb
    inter = np.where(both, np.maximum(0.0, np.minimum(a1, b1) - np.maximum(a0, b0)), 0.0)
    return la + lb - 2 * inter


def radius_criteria(ensemble: TrajectoryEnsemble, coupling: Coupling, mu: DiscreteMeasure, R: float, unit: float, *,
                    lam: DiscreteMeasure | None = None, cells: int | None = None, tau: float = TAU_DEFAULT,
                    T: int = 2, shift=None, n_bins: int = N_BINS, solver_kw=None) -> dict:
    """All computable good-radius criteria at one radius; ``unit`` is the natural length scale."""
    kw = dict(solver_kw or {})
    cells = cells or max(8, int(round(2 * R)))
    lam = lam if lam is not None else coupling.target_measure()
    d = {}
    w_mu, k_mu = _restricted_w2(mu, R, cells, kw)
    w_lam, k_lam = _restricted_w2(lam, R, cells, kw)
    d["w2_mu"], d["w2_lambda"], d["kappa_mu"], d["kappa_lambda"] = w_mu, w_lam, k_mu, k_lam
    rho = time_integrated_density(coupling, R, T)
    w_rho, k_rho = _restricted_w2(rho, R, cells, kw) if not rho.is_empty else (0.0, 0.0)
    d["w2_rho"], d["kappa_rho"] = w_rho, k_rho
    scale4 = unit**4
    out = {"restriction": (w_mu + w_lam) / scale4,
           "density": w_rho / scale4 + ((k_rho - 1) ** 2 / k_rho if k_rho > 0 else 0.0)}
    fl = boundary_flux(ensemble, R, "raw").time_integrated()
    fr = boundary_flux(ensemble, R, "reduced", tau).time_integrated()
    gf = regularized_flux(ensemble, R, "full")
    gr = regularized_flux(ensemble, R, "reduced", tau)
    l2 = w2 = 0.0
    for tag, f, g in (("", fl, gf), ("reduced_", fr, gr)):
        for sgn, s in ((1, "plus"), (-1, "minus")):
            fp, gp = f.part(sgn), g.part(sgn)
            d[f"{tag}ghat_l2_{s}"] = gp.l2_sq(n_bins)
            d[f"{tag}w2_boundary_{s}"] = _flux_w2(fp, gp, n_bins)
            l2 += d[f"{tag}ghat_l2_{s}"]
            w2 += d[f"{tag}w2_boundary_{s}"]
    out["ghat_l2"], out["boundary_w2"] = l2, w2
    x, y, m = coupling.x, coupling.y, coupling.mass
    tin = time_inside(x, y, R)
    iny = (np.einsum("ij,ij->i", y, y) < R * R).astype(float)
    gap = np.abs(iny - tin)  # int_0^1 |I(inside at t) - I(y inside)| dt
    pref = R / (np.pi * R * R)
    out["mass_crossing"] = pref * math.fsum(m * gap)
    disp = np.hypot(*(x - y).T)
    out["displacement_crossing"] = pref * math.fsum(m * gap * disp)
    if shift is not None and np.any(np.asarray(shift, float) != 0):
        st = _symmetric_time(x, y, y + np.asarray(shift, float), R)
        out["shift_crossing"] = pref * math.fsum(m * st * disp)
    else:
        out["shift_crossing"] = 0.0
    return {"R": float(R), "criteria": out, "details": d}


@dataclass
class GoodRadiusReport:
    radius: float
    index: int
    candidates: list
    records: list
    excluded: list

    def to_json(self, path=None):
        doc = {"radius": self.radius, "index": self.index, "candidates": self.candidates,
               "excluded": self.excluded, "records": self.records}
        text = json.dumps(doc, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w", newline="\n") as fh:
                fh.write(text + "\n")
        return text


def candidate_radii(window, candidates: int, seed: int = 0) -> np.ndarray:
    a, b = window
    u = rng_stream(seed, "good_radius").uniform()
    return a + (np.arange(candidates) + u) * (b - a) / candidates


def aggregate_criteria(records, criteria=CRITERIA) -> tuple[int, list]:
    """Index minimizing the max of window-normalized criteria (first index on ties)."""
    vals = np.array([[r["criteria"][c] for c in criteria] for r in records], float)
    avg = vals.mean(axis=0)
    norm = np.divide(vals, avg, out=np.zeros_like(vals), where=avg > 0)
    score = norm.max(axis=1)
    return int(np.argmin(score)), score.tolist()


def good_radius(ensemble: TrajectoryEnsemble, coupling: Coupling, mu: DiscreteMeasure, window, candidates: int = 8,
                tau: float = TAU_DEFAULT, *, radii=None, seed: int = 0, **kw):
    """Pick a radius in ``window`` where no criterion is far above its window average.

    Returns ``(R, GoodRadiusReport)``.  Candidates closer than 1e-7 * Rbar to
    the modulus of any support point are discarded, so no atom sits on the
    chosen circle.
    """
    if candidates < 8 and radii is None:
        raise ValueError("need at least 8 candidates")
    unit = window[0] / 3.0
    cand = np.asarray(radii, float) if radii is not None else candidate_radii(window, candidates, seed)
    mods = np.sort(np.concatenate([np.hypot(*coupling.x.T), np.hypot(*coupling.y.T), np.hypot(*mu.points.T)]))
    gap = 1e-7 * unit
    keep = []
    for r in cand:
        j = np.searchsorted(mods, r)
        near = [abs(mods[i] - r) for i in (j - 1, j) if 0 <= i < len(mods)]
        keep.append(not near or min(near) > gap)
    excluded = [float(r) for r, k in zip(cand, keep) if not k]
    live = [float(r) for r, k in zip(cand, keep) if k]
    if not live:
        raise ValueError("all candidate radii excluded")
    records = [radius_criteria(ensemble, coupling, mu, r, unit, tau=tau, **kw) for r in live]
    idx, score = aggregate_criteria(records)
    for r, s in zip(records, score):
        r["score"] = s
    return live[idx], GoodRadiusReport(live[idx], idx, [float(r) for r in cand], records, excluded)
