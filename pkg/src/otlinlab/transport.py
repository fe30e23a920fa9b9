"""Exact quadratic optimal transport between discrete measures.

The solver is a network simplex on a sparse candidate graph (nearest
neighbours in both directions).  After each solve the node potentials are
checked against every source/sink pair; dual-infeasible pairs are added to
the graph and pivoting resumes from the current basis.  The returned
coupling is therefore optimal for the complete bipartite problem.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial import cKDTree

from . import _flow
from .measures import Ball, DiscreteMeasure, lebesgue_quadrature, read_csv, restrict, rng_stream, write_csv

DEFAULT_SIZE_CAP = 2.0e9  # on n*m
DENSE_LIMIT = 40_000  # below this product the complete graph is used directly


class TransportError(ValueError):
    pass


@dataclass
class Coupling:
    """Atomic transference plan.

    ``sources``/``targets`` hold the support points of the two marginals and
    ``src``/``tgt`` index them for each pair.
    """

    sources: np.ndarray
    targets: np.ndarray
    src: np.ndarray
    tgt: np.ndarray
    mass: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sources = np.asarray(self.sources, float).reshape(-1, 2)
        self.targets = np.asarray(self.targets, float).reshape(-1, 2)
        self.src = np.asarray(self.src, np.int64)
        self.tgt = np.asarray(self.tgt, np.int64)
        self.mass = np.asarray(self.mass, float)
        if np.any(~(self.mass > 0)):
            raise ValueError("coupling masses must be positive")

    @classmethod
    def from_pairs(cls, x, y, m, meta=None) -> "Coupling":
        x = np.asarray(x, float).reshape(-1, 2)
        y = np.asarray(y, float).reshape(-1, 2)
        m = np.broadcast_to(np.asarray(m, float), (x.shape[0],)).copy()
        sx, ix = np.unique(x, axis=0, return_inverse=True)
        sy, iy = np.unique(y, axis=0, return_inverse=True)
        return cls(sx, sy, ix.ravel(), iy.ravel(), m, dict(meta or {}))

    @classmethod
    def identity(cls, mu: DiscreteMeasure) -> "Coupling":
        idx = np.arange(mu.size)
        return cls(mu.points.copy(), mu.points.copy(), idx, idx, mu.weights.copy())

    @property
    def x(self) -> np.ndarray:
        return self.sources[self.src]

    @property
    def y(self) -> np.ndarray:
        return self.targets[self.tgt]

    @property
    def size(self) -> int:
        return self.mass.shape[0]

    @property
    def source_mass(self) -> float:
        return float(self.mass.sum())

    target_mass = source_mass

    def source_weights(self) -> np.ndarray:
        return np.bincount(self.src, weights=self.mass, minlength=len(self.sources))

    def target_weights(self) -> np.ndarray:
        return np.bincount(self.tgt, weights=self.mass, minlength=len(self.targets))

    def source_measure(self) -> DiscreteMeasure:
        w = self.source_weights()
        keep = w > 0
        return DiscreteMeasure(self.sources[keep], w[keep])

    def target_measure(self) -> DiscreteMeasure:
        w = self.target_weights()
        keep = w > 0
        return DiscreteMeasure(self.targets[keep], w[keep])

    def cost(self) -> float:
        d = self.x - self.y
        return math.fsum(self.mass * (d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]))

    def shifted_targets(self, b) -> "Coupling":
        """Push forward under (x, y) -> (x, y - b)."""
        return Coupling(self.sources, self.targets - np.asarray(b, float), self.src, self.tgt, self.mass, dict(self.meta))

    def subset(self, keep) -> "Coupling":
        return Coupling(self.sources, self.targets, self.src[keep], self.tgt[keep], self.mass[keep], dict(self.meta))

    def to_csv(self, path):
        write_csv(path, ["x1", "y1", "x2", "y2", "m"], np.column_stack([self.x, self.y, self.mass]))

    @classmethod
    def from_csv(cls, path):
        d = read_csv(path, ["x1", "y1", "x2", "y2", "m"])
        return cls.from_pairs(d[:, :2], d[:, 2:4], d[:, 4])


@dataclass
class TransportReport:
    cost: float
    monotonicity_violation: float
    solver_iterations: int
    cyclic_violation: float = 0.0
    rounds: int = 0
    edges: int = 0
    min_reduced_cost: float = 0.0
    tolerance: float = 0.0

    def to_dict(self):
        return {k: (float(v) if isinstance(v, (float, np.floating)) else int(v)) for k, v in self.__dict__.items()}


def _support_scale(*arrays) -> float:
    pts = np.concatenate([a.reshape(-1, 2) for a in arrays])
    if len(pts) == 0:
        return 0.0
    span = pts.max(axis=0) - pts.min(axis=0)
    return float(np.hypot(*span))


def _candidate_edges(xs, ys, k):
    n, m = len(xs), len(ys)
    if n * m <= DENSE_LIMIT or k >= min(n, m):
        i, j = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
        return i.ravel(), j.ravel()
    _, nj = cKDTree(ys).query(xs, k=min(k, m))
    _, ni = cKDTree(xs).query(ys, k=min(k, n))
    i = np.concatenate([np.repeat(np.arange(n), nj.shape[1]), ni.ravel()])
    j = np.concatenate([nj.ravel(), np.repeat(np.arange(m), ni.shape[1])])
    return i, j


def _buckets(ys, per_bucket=12):
    lo = ys.min(axis=0)
    hi = ys.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    nb = max(1, int(np.sqrt(len(ys) / per_bucket)))
    cell = (np.minimum(((ys - lo) / span * nb).astype(np.int64), nb - 1))
    key = cell[:, 0] * nb + cell[:, 1]
    order = np.argsort(key, kind="stable")
    ks = key[order]
    uniq, start = np.unique(ks, return_index=True)
    ptr = np.append(start, len(ks)).astype(np.int64)
    nbk = len(uniq)
    bbox = np.empty((nbk, 4))
    for b in range(nbk):
        pts = ys[order[ptr[b]:ptr[b + 1]]]
        bbox[b] = [pts[:, 0].min(), pts[:, 0].max(), pts[:, 1].min(), pts[:, 1].max()]
    return ptr, order.astype(np.int64), bbox


class _Simplex:
    """Network simplex state over a growing set of candidate arcs."""

    def __init__(self, supply, demand, ei, ej, xs, ys):
        self.n, self.m = len(supply), len(demand)
        self.N = N = self.n + self.m
        self.xs, self.ys = xs, ys
        self.keys = set()
        sup = np.concatenate([supply, -demand])
        ei, ej = self._fresh(ei, ej)
        cost = self._cost(ei, ej)
        self.src = np.concatenate([np.zeros(N, np.int64), ei])
        self.tgt = np.concatenate([np.zeros(N, np.int64), self.n + ej])
        self.cost = np.concatenate([np.zeros(N), cost])
        self.flow = np.zeros(len(self.src))
        self.state = np.concatenate([np.zeros(N, np.int64), np.ones(len(ei), np.int64)])
        self.parent = np.zeros(N + 1, np.int64)
        self.pred = np.zeros(N + 1, np.int64)
        self.pred_dir = np.zeros(N + 1, np.int64)
        self.thread = np.zeros(N + 1, np.int64)
        self.rev_thread = np.zeros(N + 1, np.int64)
        self.succ_num = np.zeros(N + 1, np.int64)
        self.last_succ = np.zeros(N + 1, np.int64)
        self.pi = np.zeros(N + 1)
        self.cmax = float(cost.max()) if len(cost) else 0.0
        art = (self.cmax + 1.0) * (N + 1)
        _flow.ns_init(sup, self.src, self.tgt, self.cost, self.flow, self.state, self.parent, self.pred,
                      self.pred_dir, self.thread, self.rev_thread, self.succ_num, self.last_succ, self.pi, art)
        self.next_arc = N
        self.pivots = 0

    def _fresh(self, ei, ej):
        key = np.unique(np.asarray(ei, np.int64) * self.m + np.asarray(ej, np.int64))
        if self.keys:
            key = np.array([k for k in key.tolist() if k not in self.keys], np.int64)
        self.keys.update(key.tolist())
        return key // self.m, key % self.m

    def _cost(self, ei, ej):
        d = self.xs[ei] - self.ys[ej]
        return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]

    def add(self, ei, ej):
        ei, ej = self._fresh(ei, ej)
        if len(ei) == 0:
            return 0
        cost = self._cost(ei, ej)
        self.cmax = max(self.cmax, float(cost.max()))
        self.src = np.concatenate([self.src, ei])
        self.tgt = np.concatenate([self.tgt, self.n + ej])
        self.cost = np.concatenate([self.cost, cost])
        self.flow = np.concatenate([self.flow, np.zeros(len(ei))])
        self.state = np.concatenate([self.state, np.ones(len(ei), np.int64)])
        return len(ei)

    def run(self, max_pivots=10**12):
        A = len(self.src) - self.N
        block = max(10, int(4 * np.sqrt(max(A, 1))))  # wide pricing blocks pay off on lattice-like data
        eps = 1e-10 * (self.cmax + 1.0)
        status, piv, self.next_arc = _flow.ns_run(
            self.N, self.src, self.tgt, self.cost, self.flow, self.state, self.parent, self.pred, self.pred_dir,
            self.thread, self.rev_thread, self.succ_num, self.last_succ, self.pi, block, eps, self.next_arc,
            max_pivots)
        self.pivots += piv
        _flow.ns_refresh_potentials(self.N, self.src, self.tgt, self.cost, self.parent, self.pred, self.pred_dir,
                                    self.thread, self.pi)
        if status != 0:
            raise TransportError("network simplex did not terminate")

    def artificial_flow(self):
        return float(self.flow[: self.N].sum())

    def real_flows(self):
        f = self.flow[self.N:]
        keep = f > 0
        return self.src[self.N:][keep], self.tgt[self.N:][keep] - self.n, f[keep]


def solve_exact(mu: DiscreteMeasure, nu: DiscreteMeasure, *, size_cap: float = DEFAULT_SIZE_CAP,
                k_neighbors: int = 12, max_rounds: int = 50, method: str = "simplex"):
    """Optimal quadratic coupling between two discrete measures of equal mass.

    Returns ``(Coupling, TransportReport)``.  The report's
    ``min_reduced_cost`` is the dual certificate over all n*m pairs; it is
    at least ``-tolerance`` (1e-9 times the squared support diameter).
    ``method="ssp"`` selects the shortest-augmenting-path solver on the
    complete graph (small instances only).
    """
    if mu.is_empty or nu.is_empty:
        raise TransportError("empty measure")
    big = max(mu.total_mass, nu.total_mass)
    if abs(mu.total_mass - nu.total_mass) > 1e-9 * big:
        raise TransportError(f"unbalanced: masses {mu.total_mass!r} and {nu.total_mass!r}")
    n, m = mu.size, nu.size
    if float(n) * float(m) > size_cap:
        raise TransportError(f"instance too large: {n} x {m} exceeds cap {size_cap:g}")

    xs, ys = mu.points, nu.points
    supply = mu.weights.copy()
    demand = nu.weights * (mu.total_mass / nu.total_mass)
    scale = _support_scale(xs, ys)
    tol = 1e-9 * max(scale, 1e-150) ** 2
    mtol = 1e-13 * mu.total_mass / max(n, m)

    if method == "ssp":
        if n * m > 4 * DENSE_LIMIT:
            raise TransportError("ssp path is meant for small instances")
        ei, ej = _candidate_edges(xs, ys, max(n, m))
        out_ptr = np.searchsorted(ei, np.arange(n + 1)).astype(np.int64)
        d = xs[ei] - ys[ej]
        cost = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
        in_edge = np.argsort(ej, kind="stable").astype(np.int64)
        in_ptr = np.searchsorted(ej[in_edge], np.arange(m + 1)).astype(np.int64)
        flow, pot, its, status = _flow.ssp_transport(n, m, supply, demand, out_ptr, ej.astype(np.int64), cost,
                                                      ei.astype(np.int64), in_ptr, in_edge, mtol)
        if status:
            raise TransportError("infeasible")
        keep = flow > mtol
        pi_s, pi_t, rounds, ii, jj, ff = pot[:n], pot[n:], 1, ei[keep], ej[keep], flow[keep]
    elif method == "simplex":
        ei, ej = _candidate_edges(xs, ys, k_neighbors)
        ns = _Simplex(supply, demand, ei, ej, xs, ys)
        rounds = 0
        while True:
            rounds += 1
            ns.run()
            if ns.artificial_flow() > mtol * (n + m) and rounds >= max_rounds:
                raise TransportError("candidate graph stayed infeasible")
            # the simplex uses potentials with rc = c + pi_s - pi_t, the scan expects the same form
            pi_s, pi_t = ns.pi[:n].copy(), ns.pi[n:n + m].copy()
            vi, vj, worst = _violations(xs, ys, pi_s, pi_t, tol)
            if len(vi) == 0 and ns.artificial_flow() <= mtol * (n + m):
                break
            if rounds >= max_rounds:
                raise TransportError("dual certificate failed to converge")
            if ns.add(vi, vj) == 0:
                k_neighbors *= 2
                ns.add(*_candidate_edges(xs, ys, k_neighbors))
        its = ns.pivots
        ii, jj, ff = ns.real_flows()
    else:
        raise ValueError(f"unknown method {method!r}")

    _, _, worst = _violations(xs, ys, pi_s, pi_t, tol)
    order = np.lexsort((jj, ii))
    coupling = Coupling(xs, ys, ii[order], jj[order], ff[order], {"solver": method})
    mono = check_monotone(coupling, tol=tol)
    report = TransportReport(cost=coupling.cost(), monotonicity_violation=mono.monotonicity_violation,
                             solver_iterations=int(its), cyclic_violation=mono.cyclic_violation,
                             rounds=rounds, edges=int(len(ii)), min_reduced_cost=float(worst), tolerance=tol)
    return coupling, report


def _violations(xs, ys, pi_s, pi_t, tol):
    bptr, bitems, bbox = _buckets(ys)
    bmax = np.maximum.reduceat(pi_t[bitems], bptr[:-1])
    vi, vj, _, _, worst = _flow.scan_violations(xs, ys, pi_s, pi_t, tol, bptr, bitems, bbox, bmax,
                                                4 * (len(xs) + len(ys)))
    return vi, vj, worst


def transport_cost(mu: DiscreteMeasure, nu: DiscreteMeasure, **kw) -> float:
    return solve_exact(mu, nu, **kw)[1].cost


def brute_force_oracle(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Minimum assignment cost by enumerating all permutations (at most 8 atoms)."""
    n = mu.size
    if n != nu.size:
        raise ValueError("oracle needs equal atom counts")
    if n > 8:
        raise ValueError("oracle limited to 8 atoms")
    w = mu.weights[0] if n else 0.0
    if np.any(mu.weights != w) or np.any(nu.weights != w):
        raise ValueError("oracle needs equal unit masses")
    d = mu.points[:, None, :] - nu.points[None, :, :]
    c = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]
    best = math.inf
    rows = range(n)
    for perm in itertools.permutations(range(n)):
        best = min(best, math.fsum(w * c[i, perm[i]] for i in rows))
    return best


def wasserstein_sq_localized(mu: DiscreteMeasure, ball: Ball, cells_per_diameter: int, **kw):
    """W^2 between mu restricted to ``ball`` and kappa times the ball's Lebesgue quadrature.

    Returns ``(cost, kappa)``.
    """
    sub, kappa = restrict(mu, ball)
    if sub.is_empty:
        raise TransportError("empty restriction")
    quad = lebesgue_quadrature(ball, cells_per_diameter)
    quad = DiscreteMeasure(quad.points, quad.weights * (sub.total_mass / quad.total_mass))
    _, rep = solve_exact(sub, quad, **kw)
    return rep.cost, kappa


def check_monotone(coupling: Coupling, tol: float | None = None, seed: int = 0,
                   max_samples: int = 1_000_000) -> TransportReport:
    """Pairwise and sampled three-cycle monotonicity defects of a coupling's support."""
    x, y = coupling.x, coupling.y
    k = len(x)
    if tol is None:
        tol = 1e-9 * _support_scale(x, y) ** 2
    rng = rng_stream(seed, "check_monotone")
    if k < 2:
        return TransportReport(coupling.cost() if k else 0.0, 0.0, 0, tolerance=tol)
    if k * (k - 1) // 2 <= max(2000 * 1999 // 2, 0) and k <= 2000:
        ia, ib = np.triu_indices(k, 1)
    else:
        ia = rng.integers(0, k, max_samples)
        ib = rng.integers(0, k, max_samples)
    pair = _flow.pair_defects(x, y, ia.astype(np.int64), ib.astype(np.int64))
    worst_pair = float(pair.min()) if len(pair) else 0.0
    worst_cyc = 0.0
    if k >= 3:
        if k * (k - 1) * (k - 2) // 6 <= max_samples:
            tri = np.array(list(itertools.combinations(range(k), 3)), np.int64).reshape(-1, 3)
        else:
            tri = rng.integers(0, k, (max_samples, 3))
            tri = tri[(tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2]) & (tri[:, 0] != tri[:, 2])]
        cyc = _flow.triple_defects(x, y, tri[:, 0].copy(), tri[:, 1].copy(), tri[:, 2].copy())
        worst_cyc = float(cyc.min()) if len(cyc) else 0.0
    return TransportReport(cost=coupling.cost(), monotonicity_violation=min(0.0, worst_pair),
                           solver_iterations=0, cyclic_violation=min(0.0, worst_cyc), tolerance=tol)


# ---------------------------------------------------------------------------
# transport on a circle


def _lifted_quantile_cost(pf, cf, pg, cg, M, alpha):
    """Integral over u in (0, M) of |F^-1(u) - G^-1(u - alpha)|^2 with G lifted periodically."""
    shifted = cg[1:-1] + alpha
    shifted = shifted - M * np.floor(shifted / M)
    cuts = np.unique(np.concatenate([cf, shifted, [0.0, M]]))
    cuts = cuts[(cuts >= 0) & (cuts <= M)]
    lo, hi = cuts[:-1], cuts[1:]
    mid = 0.5 * (lo + hi)
    a = pf[np.minimum(np.searchsorted(cf, mid, side="right") - 1, len(pf) - 1)]
    v = mid - alpha
    wraps = np.floor(v / M)
    vr = v - wraps * M
    b = pg[np.minimum(np.searchsorted(cg, vr, side="right") - 1, len(pg) - 1)] + 2.0 * np.pi * wraps
    return math.fsum((hi - lo) * (a - b) ** 2)


def circle_wasserstein_sq(f, g, radius: float = 1.0, angles=None) -> float:
    """Squared Wasserstein distance between two angular histograms on a circle of given radius.

    Bin ``j`` of an ``n``-bin histogram sits at angle ``2 pi j / n`` unless
    ``angles`` is supplied.  Distances are geodesic arcs.
    """
    f = np.asarray(f, float)
    g = np.asarray(g, float)
    if f.shape != g.shape:
        raise ValueError("histograms must share the bin count")
    Mf, Mg = f.sum(), g.sum()
    if abs(Mf - Mg) > 1e-9 * max(abs(Mf), abs(Mg), 1e-300):
        raise ValueError("mass mismatch between histograms")
    if Mf <= 0:
        return 0.0
    n = len(f)
    th = 2.0 * np.pi * np.arange(n) / n if angles is None else np.mod(np.asarray(angles, float), 2 * np.pi)
    order = np.argsort(th, kind="stable")
    th = th[order]
    f, g = f[order], g[order] * (Mf / Mg)
    kf, kg = f > 0, g > 0
    pf, pg = th[kf], th[kg]
    cf = np.concatenate([[0.0], np.cumsum(f[kf])])
    cg = np.concatenate([[0.0], np.cumsum(g[kg])])
    cf[-1] = cg[-1] = Mf
    # convex in the offset; the minimiser of the lifted problem gives the circle distance
    fun = lambda a: _lifted_quantile_cost(pf, cf, pg, cg, Mf, a)
    res = minimize_scalar(fun, bounds=(-Mf, Mf), method="bounded", options={"xatol": 1e-13 * Mf, "maxiter": 2000})
    best = min(res.fun, fun(0.0))
    # the optimum of a piecewise-linear convex function sits on a breakpoint; polish there
    bp = (cf[:, None] - cg[None, :]).ravel()
    near = bp[np.abs(bp - res.x) <= max(1e-6 * Mf, 4 * Mf / max(len(pf), len(pg)) ** 2)]
    for a in near[:256]:
        best = min(best, fun(a))
    return float(radius**2 * best)
