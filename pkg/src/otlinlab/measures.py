"""Discrete measures on the plane: generators, restriction and quadratures.

Everything lives in two dimensions.  A measure is a weighted point cloud; the
Lebesgue measure on a disk is represented by an exact cell quadrature whose
weights are the areas of grid squares clipped to the disk.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np

UNIT_BALL_AREA = np.pi
UNIT_SPHERE_LENGTH = 2.0 * np.pi


def rng_stream(seed: int, *names: str) -> np.random.Generator:
    """Counter-based generator for one named operation.

    Streams for different names are statistically independent and do not
    depend on the order in which operations are called.
    """
    key = tuple(zlib.crc32(n.encode()) for n in names)
    ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class Ball:
    center: tuple = (0.0, 0.0)
    radius: float = 1.0

    def __post_init__(self):
        if not (self.radius > 0):
            raise ValueError("ball radius must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def area(self) -> float:
        return UNIT_BALL_AREA * self.radius**2

    def contains(self, pts) -> np.ndarray:
        """Membership in the open ball."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        d2 = (pts[:, 0] - self.center[0]) ** 2 + (pts[:, 1] - self.center[1]) ** 2
        return d2 < self.radius**2

    def to_dict(self):
        return {"center": list(self.center), "radius": self.radius}


@dataclass
class DiscreteMeasure:
    """Weighted point cloud.  ``meta`` carries provenance for serialization."""

    points: np.ndarray
    weights: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.ascontiguousarray(np.asarray(self.points, dtype=float).reshape(-1, 2))
        self.weights = np.ascontiguousarray(np.asarray(self.weights, dtype=float).reshape(-1))
        if self.points.shape[0] != self.weights.shape[0]:
            raise ValueError("points and weights differ in length")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite coordinates")
        if np.any(~(self.weights > 0)):
            raise ValueError("weights must be strictly positive")
        self._total = float(np.sum(self.weights)) if len(self.weights) else 0.0

    @property
    def total_mass(self) -> float:
        return self._total

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.size == 0

    @classmethod
    def empty(cls, **meta):
        return cls(np.zeros((0, 2)), np.zeros(0), dict(meta, empty=True))

    def translated(self, shift) -> "DiscreteMeasure":
        return DiscreteMeasure(self.points + np.asarray(shift, float), self.weights.copy(), dict(self.meta))

    def scaled(self, s: float) -> "DiscreteMeasure":
        return DiscreteMeasure(self.points * s, self.weights.copy(), dict(self.meta))

    def first_moment(self) -> np.ndarray:
        return self.weights @ self.points

    # serialization
    def to_csv(self, path):
        write_csv(path, ["x", "y", "w"], np.column_stack([self.points, self.weights]))

    @classmethod
    def from_csv(cls, path, meta=None):
        data = read_csv(path, ["x", "y", "w"])
        return cls(data[:, :2], data[:, 2], dict(meta or {}))

    def to_json(self, path):
        doc = {
            "meta": self.meta,
            "points": [[float(a), float(b)] for a, b in self.points],
            "weights": [float(w) for w in self.weights],
        }
        with open(path, "w", newline="\n") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        return cls(np.array(doc["points"], float).reshape(-1, 2), np.array(doc["weights"], float), doc.get("meta", {}))


def write_csv(path, columns, rows, fmt="%.17g"):
    """CSV with LF endings and 17 significant digits (round-trips doubles)."""
    rows = np.asarray(rows)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else fmt % v for v in row) + "\n")


def read_csv(path, columns):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[: len(columns)] != list(columns):
            raise ValueError(f"{path}: expected columns {columns}, got {header}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2, usecols=range(len(columns)))
    return data.reshape(-1, len(columns))


# ---------------------------------------------------------------------------
# generators


def sample_poisson_process(intensity: float, ball: Ball, seed: int) -> DiscreteMeasure:
    """Homogeneous Poisson point process in ``ball`` with unit weights."""
    if not intensity > 0:
        raise ValueError("intensity must be positive")
    rng = rng_stream(seed, "sample_poisson_process")
    n = int(rng.poisson(intensity * ball.area))
    meta = {"generator": "poisson", "seed": int(seed), "intensity": intensity, "ball": ball.to_dict()}
    if n == 0:
        return DiscreteMeasure.empty(**meta)
    r = ball.radius * np.sqrt(rng.random(n))
    phi = 2.0 * np.pi * rng.random(n)
    pts = np.column_stack([ball.center[0] + r * np.cos(phi), ball.center[1] + r * np.sin(phi)])
    # the open-ball convention; a boundary hit has probability zero but is cheap to rule out
    keep = ball.contains(pts)
    return DiscreteMeasure(pts[keep], np.ones(int(keep.sum())), meta)


def lattice_sites(spacing: float, ball: Ball) -> np.ndarray:
    """Sites of ``center + spacing * Z^2`` inside the open ball, row-major order."""
    m = int(np.floor(ball.radius / spacing)) + 1
    k = np.arange(-m, m + 1) * spacing
    gx, gy = np.meshgrid(k, k, indexing="ij")
    pts = np.column_stack([gx.ravel() + ball.center[0], gy.ravel() + ball.center[1]])
    return pts[ball.contains(pts)]


def perturbed_lattice(spacing: float, amplitude: float, ball: Ball, seed: int) -> DiscreteMeasure:
    """Square lattice in the ball with i.i.d. uniform site displacements."""
    if spacing >= ball.radius:
        raise ValueError("degenerate lattice: spacing must be smaller than the ball radius")
    if not (0 <= amplitude <= spacing / 2):
        raise ValueError("amplitude must lie in [0, spacing/2]")
    sites = lattice_sites(spacing, ball)
    rng = rng_stream(seed, "perturbed_lattice")
    noise = rng.uniform(-1.0, 1.0, size=sites.shape)
    meta = {"generator": "perturbed_lattice", "seed": int(seed), "spacing": spacing,
            "amplitude": amplitude, "ball": ball.to_dict()}
    return DiscreteMeasure(sites + amplitude * noise, np.full(len(sites), spacing**2), meta)


# ---------------------------------------------------------------------------
# exact clipped-cell quadrature


def _strip_integrals(a, b, y0, y1, R):
    """Area and first moments of {a<x<b, y0<y<y1, x^2+y^2<R^2}.

    The caller guarantees that on (a, b) neither the top nor the bottom
    boundary switches between the straight edge and the circle.
    """
    xm = 0.5 * (a + b)
    sm = np.sqrt(max(R * R - xm * xm, 0.0))
    # ties only occur at a tangency, where the circle is the binding edge
    top_circle = sm <= y1
    bot_circle = -sm >= y0
    if min(y1, sm) <= max(y0, -sm):
        return 0.0, 0.0, 0.0

    def F(x):  # primitive of sqrt(R^2 - x^2)
        s = np.sqrt(max(R * R - x * x, 0.0))
        return 0.5 * (x * s + R * R * np.arcsin(np.clip(x / R, -1.0, 1.0)))

    def G(x):  # primitive of x sqrt(R^2 - x^2)
        return -(max(R * R - x * x, 0.0) ** 1.5) / 3.0

    L = b - a
    int_s, int_xs = F(b) - F(a), G(b) - G(a)
    int_x = 0.5 * (b * b - a * a)
    int_s2 = R * R * L - (b**3 - a**3) / 3.0  # integral of R^2 - x^2
    # top edge contribution minus bottom edge contribution
    area = (int_s if top_circle else y1 * L) - (-int_s if bot_circle else y0 * L)
    mx = (int_xs if top_circle else y1 * int_x) - (-int_xs if bot_circle else y0 * int_x)
    my = 0.5 * ((int_s2 if top_circle else y1 * y1 * L) - (int_s2 if bot_circle else y0 * y0 * L))
    return area, mx, my


def clipped_cell(x0, x1, y0, y1, R):
    """Area and centroid of the rectangle [x0,x1]x[y0,y1] intersected with B_R(0)."""
    cuts = [x0, x1]
    for y in (y0, y1):
        if abs(y) < R:
            s = np.sqrt(R * R - y * y)
            cuts += [-s, s]
    cuts += [-R, R]
    cuts = sorted(c for c in set(cuts) if x0 <= c <= x1)
    area = mx = my = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b > a:
            da, dx, dy = _strip_integrals(a, b, y0, y1, R)
            area += da
            mx += dx
            my += dy
    if area <= 0:
        return 0.0, np.array([np.nan, np.nan])
    return area, np.array([mx / area, my / area])


def lebesgue_quadrature(ball: Ball, cells_per_diameter: int) -> DiscreteMeasure:
    """Unit-density quadrature of the ball on a square grid of side 2R/n.

    Each atom sits at the centroid of its cell clipped to the ball and carries
    the clipped area, so affine functions are integrated exactly.
    """
    n = int(cells_per_diameter)
    if n < 8:
        raise ValueError("cells_per_diameter must be at least 8")
    R = ball.radius
    h = 2.0 * R / n
    edges = -R + h * np.arange(n + 1)
    edges[-1] = R
    X0, Y0 = np.meshgrid(edges[:-1], edges[:-1], indexing="ij")
    X1, Y1 = np.meshgrid(edges[1:], edges[1:], indexing="ij")
    far = np.maximum(X0**2, X1**2) + np.maximum(Y0**2, Y1**2)
    near = np.where(X0 * X1 < 0, 0.0, np.minimum(X0**2, X1**2)) + np.where(Y0 * Y1 < 0, 0.0, np.minimum(Y0**2, Y1**2))
    inside = far <= R * R
    cut = (~inside) & (near < R * R)

    pts = [np.column_stack([(X0[inside] + X1[inside]) / 2, (Y0[inside] + Y1[inside]) / 2])]
    wts = [((X1 - X0) * (Y1 - Y0))[inside]]
    bp, bw = [], []
    for i, j in zip(*np.nonzero(cut)):
        area, c = clipped_cell(X0[i, j], X1[i, j], Y0[i, j], Y1[i, j], R)
        if area > 1e-14 * h * h:
            bp.append(c)
            bw.append(area)
    if bp:
        pts.append(np.array(bp))
        wts.append(np.array(bw))
    P = np.concatenate(pts) + np.asarray(ball.center)
    W = np.concatenate(wts)
    order = np.lexsort((P[:, 1], P[:, 0]))
    meta = {"generator": "lebesgue_quadrature", "cells_per_diameter": n, "ball": ball.to_dict()}
    return DiscreteMeasure(P[order], W[order], meta)


def restrict(measure: DiscreteMeasure, ball: Ball):
    """Return ``(measure restricted to the open ball, kappa)``."""
    if measure.is_empty:
        return DiscreteMeasure.empty(**measure.meta), 0.0
    keep = ball.contains(measure.points)
    if not keep.any():
        return DiscreteMeasure.empty(**measure.meta), 0.0
    sub = DiscreteMeasure(measure.points[keep], measure.weights[keep], dict(measure.meta))
    return sub, sub.total_mass / ball.area


def normalize_to_mass(measure: DiscreteMeasure, target_mass: float) -> DiscreteMeasure:
    if measure.is_empty:
        raise ValueError("cannot normalize an empty measure")
    if not target_mass > 0:
        raise ValueError("target mass must be positive")
    if target_mass == measure.total_mass:
        return DiscreteMeasure(measure.points.copy(), measure.weights.copy(), dict(measure.meta))
    return DiscreteMeasure(measure.points.copy(), measure.weights * (target_mass / measure.total_mass), dict(measure.meta))


# ---------------------------------------------------------------------------
# mollifier


@dataclass(frozen=True)
class Mollifier:
    """Radial bump (4/pi)(1-|x|^2)^3 rescaled to radius ``radius`` with unit mass."""

    radius: float = 1.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("mollifier radius must be positive")

    def profile(self, r):
        """eta_R as a function of |x|."""
        s = np.asarray(r, float) / self.radius
        return np.where(s < 1.0, (4.0 / np.pi) * (1.0 - s * s) ** 3, 0.0) / self.radius**2

    def dprofile(self, r):
        """Radial derivative of the profile."""
        s = np.asarray(r, float) / self.radius
        return np.where(s < 1.0, (4.0 / np.pi) * (-6.0 * s) * (1.0 - s * s) ** 2, 0.0) / self.radius**3

    def __call__(self, x, center=(0.0, 0.0)):
        x = np.asarray(x, float).reshape(-1, 2) - np.asarray(center, float)
        return self.profile(np.hypot(x[:, 0], x[:, 1]))

    def sup_hessian(self) -> float:
        # second radial derivative is the extreme eigenvalue; its max sits at the centre
        return 24.0 / np.pi / self.radius**4

    def quadrature(self, n_r: int = 8, n_theta: int = 16):
        """Polar Gauss-Legendre x trapezoid rule on the support.

        Exact for the mollifier times any polynomial of degree < min(2 n_r - 7, n_theta).
        """
        g, gw = np.polynomial.legendre.leggauss(n_r)
        r = 0.5 * self.radius * (g + 1.0)
        wr = 0.5 * self.radius * gw * r
        th = 2.0 * np.pi * np.arange(n_theta) / n_theta
        R_, T_ = np.meshgrid(r, th, indexing="ij")
        pts = np.column_stack([(R_ * np.cos(T_)).ravel(), (R_ * np.sin(T_)).ravel()])
        w = (wr[:, None] * np.full(n_theta, 2.0 * np.pi / n_theta)[None, :]).ravel()
        return pts, w

    def integrate(self, fn, center=(0.0, 0.0), n_r: int = 8, n_theta: int = 16):
        """Integral of eta_R(x - center) fn(x) dx; ``fn`` maps (n,2) points to (n,...) values."""
        pts, w = self.quadrature(n_r, n_theta)
        vals = np.asarray(fn(pts + np.asarray(center, float)))
        weights = w * self.profile(np.hypot(pts[:, 0], pts[:, 1]))
        return np.tensordot(weights, vals, axes=(0, 0))

    def as_measure(self, center=(0.0, 0.0), mass: float = 1.0, n_r: int = 8, n_theta: int = 16) -> DiscreteMeasure:
        """Atomic representation of mass * eta_R(. - center)."""
        pts, w = self.quadrature(n_r, n_theta)
        weights = mass * w * self.profile(np.hypot(pts[:, 0], pts[:, 1]))
        keep = weights > 0
        return DiscreteMeasure(pts[keep] + np.asarray(center, float), weights[keep], {"generator": "mollified_atom"})
