"""Neumann problems on disks and the annulus dipole.

The solver works on a polar grid: a real FFT in the angle and, for every
angular mode, a second-order finite-volume two-point problem in the radius.
Cells are centred at r_i = (i + 1/2) dr and theta_j = 2 pi j / n_theta.  The
centre needs no special treatment because the innermost face has zero area;
the outer face carries the prescribed normal flux.

Conventions: the equation solved is ``Laplace u = rhs + c`` in B_R with
``d u / d nu = g`` on the boundary, where ``c`` is the compatibility constant
``(int g - int rhs) / |B_R|``.  Fields are normalised to zero mean.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from .measures import DiscreteMeasure, Mollifier, write_csv

TWO_PI = 2.0 * np.pi


class PoissonError(ValueError):
    pass


def _check_grid(n_r, n_theta):
    if n_r < 32:
        raise PoissonError("n_r must be at least 32")
    if n_theta < 32 or n_theta & (n_theta - 1):
        raise PoissonError("n_theta must be a power of two, at least 32")


def angular_grid(n_theta: int) -> np.ndarray:
    return TWO_PI * np.arange(n_theta) / n_theta


def bin_angles(theta, mass, n_bins: int, radius: float) -> np.ndarray:
    """Angular density (per unit arc length) of atoms binned to the grid.

    Bin j is centred at 2 pi j / n_bins.
    """
    theta = np.asarray(theta, float)
    idx = np.floor(np.mod(theta, TWO_PI) / (TWO_PI / n_bins) + 0.5).astype(np.int64) % n_bins
    out = np.bincount(idx, weights=np.asarray(mass, float), minlength=n_bins)
    return out / (radius * TWO_PI / n_bins)


def _flux_density(flux, n_theta, R):
    if flux is None:
        return np.zeros(n_theta)
    if hasattr(flux, "density"):
        g = np.asarray(flux.density(n_theta), float)
    elif callable(flux):
        g = np.asarray(flux(angular_grid(n_theta)), float)
    else:
        g = np.asarray(flux, float)
    if g.shape != (n_theta,):
        raise PoissonError(f"boundary flux has {g.size} samples, grid has {n_theta}")
    if not np.all(np.isfinite(g)):
        raise PoissonError("non-finite flux density")
    return g


def splat(measure: DiscreteMeasure, R: float, n_r: int, n_theta: int) -> np.ndarray:
    """Deposit atoms on the polar cells, bilinear in (r, theta); returns cell masses."""
    out = np.zeros(n_r * n_theta)
    if measure is None or measure.is_empty:
        return out.reshape(n_r, n_theta)
    p = measure.points
    r = np.hypot(p[:, 0], p[:, 1])
    keep = r < R
    r, p, m = r[keep], p[keep], measure.weights[keep]
    dr, dth = R / n_r, TWO_PI / n_theta
    s = r / dr - 0.5
    i0 = np.floor(s).astype(np.int64)
    fr = s - i0
    # below the first centre or above the last one the mass stays in the end ring
    lo, hi = i0 < 0, i0 >= n_r - 1
    fr[lo], i0[lo] = 0.0, 0
    fr[hi], i0[hi] = 0.0, n_r - 1
    i1 = np.minimum(i0 + 1, n_r - 1)
    a = np.mod(np.arctan2(p[:, 1], p[:, 0]), TWO_PI) / dth
    j0 = np.floor(a).astype(np.int64)
    fa = a - j0
    j0 %= n_theta
    j1 = (j0 + 1) % n_theta
    for ii, wr in ((i0, 1.0 - fr), (i1, fr)):
        for jj, wa in ((j0, 1.0 - fa), (j1, fa)):
            np.add.at(out, ii * n_theta + jj, m * wr * wa)
    return out.reshape(n_r, n_theta)


def _cell_average(fn, R, n_r, n_theta, nq=3):
    """Radial cell averages of a density ``fn(x, y)``, sampled pointwise in the angle."""
    dr = R / n_r
    g, w = np.polynomial.legendre.leggauss(nq)
    rc = (np.arange(n_r) + 0.5) * dr
    tc = angular_grid(n_theta)
    acc = np.zeros((n_r, n_theta))
    norm = np.zeros((n_r, 1))
    for ga, wa in zip(g, w):
        rr = rc + 0.5 * dr * ga
        X = rr[:, None] * np.cos(tc)[None, :]
        Y = rr[:, None] * np.sin(tc)[None, :]
        acc += wa * rr[:, None] * fn(X, Y)
        norm[:, 0] += wa * rr
    return acc / norm


@dataclass
class NeumannPoissonField:
    """Solution of Laplace u = rhs + c on B_R with prescribed normal flux."""

    radius: float
    n_r: int
    n_theta: int
    coef: np.ndarray  # (n_r, n_theta//2 + 1) angular Fourier coefficients, u = sum coef_m e^{i m theta}
    c: float
    flux: np.ndarray  # boundary flux density on the angular grid
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._splines = {}

    @property
    def dr(self):
        return self.radius / self.n_r

    @property
    def r_nodes(self):
        return (np.arange(self.n_r) + 0.5) * self.dr

    def _flux_coef(self):
        return np.fft.rfft(self.flux) / self.n_theta

    def _spline(self, m):
        """Cubic spline of mode m on [-r_0, R] built from parity and the boundary flux."""
        sp = self._splines.get(m)
        if sp is None:
            r = self.r_nodes
            u = self.coef[:, m]
            ghost = u[-1] + self.dr * self._flux_coef()[m]
            sign = -1.0 if m % 2 else 1.0
            rr = np.concatenate([-r[:2][::-1], r, [self.radius + 0.5 * self.dr]])
            uu = np.concatenate([sign * u[:2][::-1], u, [ghost]])
            sp = CubicSpline(rr, uu)
            self._splines[m] = sp
        return sp

    def _weights(self):
        w = np.full(self.n_theta // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        return w

    def _modes(self, r, deriv=0):
        n_modes = self.n_theta // 2 + 1
        out = np.empty((n_modes, len(r)), complex)
        for m in range(n_modes):
            out[m] = self._spline(m)(r, deriv)
        return out

    def value(self, points):
        p = np.asarray(points, float).reshape(-1, 2)
        r = np.hypot(p[:, 0], p[:, 1])
        th = np.arctan2(p[:, 1], p[:, 0])
        ms = np.arange(self.n_theta // 2 + 1)
        e = np.exp(1j * ms[:, None] * th[None, :])
        return np.real((self._weights()[:, None] * self._modes(r) * e).sum(axis=0))

    def polar_gradient(self, points):
        """(u_r, u_theta / r) in the closed disk."""
        p = np.asarray(points, float).reshape(-1, 2)
        r = np.hypot(p[:, 0], p[:, 1])
        th = np.arctan2(p[:, 1], p[:, 0])
        ms = np.arange(self.n_theta // 2 + 1)
        e = np.exp(1j * ms[:, None] * th[None, :]) * self._weights()[:, None]
        ur = np.real((self._modes(r, 1) * e).sum(axis=0))
        safe = np.where(r > 0, r, 1.0)
        ut = np.real((1j * ms[:, None] * self._modes(r) * e).sum(axis=0)) / safe
        return ur, ut, th

    def gradient(self, points):
        """Cartesian gradient; the origin is handled through the mode-1 fit."""
        p = np.asarray(points, float).reshape(-1, 2)
        ur, ut, th = self.polar_gradient(p)
        cs, sn = np.cos(th), np.sin(th)
        g = np.column_stack([ur * cs - ut * sn, ur * sn + ut * cs])
        at0 = (p[:, 0] == 0) & (p[:, 1] == 0)
        if at0.any():
            g[at0] = gradient_at_origin(self)
        return g

    def mean(self):
        """Quadrature mean over the disk (only mode 0 contributes)."""
        r = self.r_nodes
        return float(np.real(self.coef[:, 0]) @ r * self.dr * TWO_PI / (np.pi * self.radius**2))

    def to_csv(self, path):
        r = self.r_nodes
        th = angular_grid(self.n_theta)
        R_, T_ = np.meshgrid(r, th, indexing="ij")
        pts = np.column_stack([(R_ * np.cos(T_)).ravel(), (R_ * np.sin(T_)).ravel()])
        ur, ut, _ = self.polar_gradient(pts)
        u = np.fft.irfft(self.coef * self.n_theta, n=self.n_theta, axis=1).ravel()
        write_csv(path, ["r", "theta", "u", "ur", "utheta"], np.column_stack([R_.ravel(), T_.ravel(), u, ur, ut]))


_W_MODES = 4  # low modes solved for w = u / r^m


def _solve_mode_w(m, f, g, R, n_r):
    """Mode m in the variable w = u / r^m, i.e. (r^(2m+1) w')' = r^(m+1) f.

    The flux form is exact for w = a + b r^2, the leading behaviour of a
    regular mode near the centre, so the centre gives no log-type error.
    """
    dr = R / n_r
    lo = np.arange(n_r) * dr
    hi = lo + dr
    p = 2 * m + 1
    a = hi[:-1] ** p / dr
    # cell integral of f r^(m+1), exact for f ~ r^m inside the cell
    i1 = (hi**2 - lo**2) / 2.0
    i2 = (hi ** (2 * m + 2) - lo ** (2 * m + 2)) / (2 * m + 2)
    i3 = (hi ** (m + 2) - lo ** (m + 2)) / (m + 2)
    b = f * i1 * i2 / i3
    # outer face: w(R) extrapolated half a cell from the last centre
    k = R**p / (R**m + m * R ** (m - 1) * dr / 2.0)
    diag = -(np.concatenate([[0.0], a]) + np.concatenate([a, [0.0]]))
    diag[-1] -= k * m * R ** (m - 1)
    b = b.astype(complex)
    b[-1] -= k * g
    ab = np.zeros((3, n_r), complex)
    ab[0, 1:] = a
    ab[1] = diag
    ab[2, :-1] = a
    w = solve_banded((1, 1), ab, b)
    return w * ((lo + hi) / 2.0) ** m


def solve_neumann(rhs=None, boundary_flux=None, R: float = 1.0, n_r: int = 256, n_theta: int = 256,
                  subtract_one: bool = False) -> NeumannPoissonField:
    """Solve Laplace u = rhs (- 1) + c in B_R with normal flux ``boundary_flux``.

    ``rhs`` is a DiscreteMeasure (splatted onto the grid), a callable density
    ``f(x, y)`` or None.  ``boundary_flux`` is an angular density sampled on
    the grid, a callable of the angle, an object with ``density(n)`` or None.
    """
    _check_grid(n_r, n_theta)
    R = float(R)
    dr, dth = R / n_r, TWO_PI / n_theta
    r = (np.arange(n_r) + 0.5) * dr
    area = r[:, None] * dr * dth
    if rhs is None:
        f = np.zeros((n_r, n_theta))
    elif isinstance(rhs, DiscreteMeasure):
        f = splat(rhs, R, n_r, n_theta) / area
    elif callable(rhs):
        f = _cell_average(rhs, R, n_r, n_theta)
    else:
        raise PoissonError("rhs must be a measure, a density callable or None")
    if subtract_one:
        f = f - 1.0
    g = _flux_density(boundary_flux, n_theta, R)

    F = np.fft.rfft(f, axis=1) / n_theta
    G = np.fft.rfft(g) / n_theta
    # discrete compatibility: sum_i (f0_i + c) r_i dr = R g0
    c = float(np.real(R * G[0] - F[:, 0] @ r * dr) / (R * R / 2.0))

    coef = np.zeros((n_r, n_theta // 2 + 1), complex)
    faces = np.arange(1, n_r + 1) * dr  # outer face of each cell
    # mode 0 by integrating the flux outward
    src = (np.real(F[:, 0]) + c) * r * dr
    flx = np.cumsum(src)[:-1]
    du = flx / faces[:-1] * dr
    u0 = np.concatenate([[0.0], np.cumsum(du)])
    coef[:, 0] = u0
    # modes m >= 1: tridiagonal systems scaled by r_i dr
    lower = faces[:-1] / dr  # coupling of cell i+1 to i
    for m in range(1, n_theta // 2 + 1):
        if m <= _W_MODES:
            coef[:, m] = _solve_mode_w(m, F[:, m], G[m], R, n_r)
            continue
        diag = -(np.concatenate([[0.0], faces[:-1]]) + np.concatenate([faces[:-1], [0.0]])) / dr - m * m * dr / r
        ab = np.zeros((3, n_r), complex)
        ab[0, 1:] = lower
        ab[1] = diag
        ab[2, :-1] = lower
        b = F[:, m] * r * dr
        b[-1] -= R * G[m]
        coef[:, m] = solve_banded((1, 1), ab, b)
    fld = NeumannPoissonField(R, n_r, n_theta, coef, c, g, {"subtract_one": bool(subtract_one)})
    coef[:, 0] -= fld.mean()
    return fld


def gradient_at_origin(field: NeumannPoissonField) -> np.ndarray:
    """Gradient at the centre from the mode-1 profile, fitted as a r + b r^3 on the first two cells."""
    r = field.r_nodes[:2]
    A = np.column_stack([r, r**3])
    u1 = field.coef[:2, 1] if field.n_theta > 2 else np.zeros(2)
    a = np.linalg.solve(A, np.real(u1))[0] + 1j * np.linalg.solve(A, np.imag(u1))[0]
    return np.array([2.0 * a.real, -2.0 * a.imag])


def mollified_gradient_average(field: NeumannPoissonField, eta: Mollifier, n_gauss: int = 64) -> np.ndarray:
    """int eta_R grad u, computed as -int u grad eta_R (only mode 1 survives)."""
    if eta.radius > field.radius * (1 + 1e-12):
        raise PoissonError("mollifier radius exceeds the field radius")
    g, w = np.polynomial.legendre.leggauss(n_gauss)
    rr = 0.5 * eta.radius * (g + 1.0)
    ww = 0.5 * eta.radius * w
    u1 = field._spline(1)(rr)
    k = -TWO_PI * np.sum(ww * eta.dprofile(rr) * rr * u1)
    return np.array([k.real, -k.imag])


def boundary_moment(field: NeumannPoissonField, radius: float | None = None) -> np.ndarray:
    """(1/|B_rho|) times the boundary integral of x (nu . grad u) over the circle of radius rho.

    At the field radius the prescribed flux datum is used; inside, the
    radial derivative of the mode-1 profile.
    """
    if radius is None or abs(radius - field.radius) <= 1e-12 * field.radius:
        th = angular_grid(field.n_theta)
        R = field.radius
        w = R * TWO_PI / field.n_theta
        mom = R * np.array([np.sum(np.cos(th) * field.flux), np.sum(np.sin(th) * field.flux)]) * w
        return mom / (np.pi * R * R)
    if not 0 < radius < field.radius:
        raise PoissonError("radius outside the field's disk")
    d = field._spline(1)(radius, 1)
    return np.array([2.0 * d.real, -2.0 * d.imag])



def ball_average_gradient(field: NeumannPoissonField, radius: float) -> np.ndarray:
    """(1/|B_rho|) int_{B_rho} grad u, through the boundary integral of u nu (mode 1 only)."""
    if not 0 < radius <= field.radius * (1 + 1e-12):
        raise PoissonError("radius outside the field's disk")
    u1 = field._spline(1)(min(radius, field.radius))
    return np.array([2.0 * u1.real, -2.0 * u1.imag]) / radius

# ---------------------------------------------------------------------------
# annulus dipole


@dataclass(frozen=True)
class AnnulusDipole:
    """Piecewise harmonic field with jump x_d / |B_r| across the inner circle."""

    r: float
    R: float
    direction: int = 1

    def __post_init__(self):
        if not 0 < self.r < self.R:
            raise ValueError("need 0 < r < R")
        if self.direction not in (1, 2):
            raise ValueError("direction is 1 or 2")


def dipole_value(dipole: AnnulusDipole, x) -> np.ndarray:
    """Closed-form value; on the inner circle the inside limit is returned."""
    p = np.asarray(x, float).reshape(-1, 2)
    xd = p[:, dipole.direction - 1]
    q = p[:, 0] ** 2 + p[:, 1] ** 2
    r2, R2 = dipole.r**2, dipole.R**2
    out = np.zeros(len(p))
    inner = q <= r2
    ann = (q > r2) & (q <= R2)
    out[inner] = (1.0 / R2 - 1.0 / r2) * xd[inner] / TWO_PI
    out[ann] = (xd[ann] / R2 + xd[ann] / q[ann]) / TWO_PI
    return out


def dipole_jump(dipole: AnnulusDipole, x) -> np.ndarray:
    """Outside minus inside limit across the inner circle at points of that circle."""
    p = np.asarray(x, float).reshape(-1, 2)
    return p[:, dipole.direction - 1] / (np.pi * dipole.r**2)


# Names of deliberately broken code paths, used only by the verification harness
# to prove that its checks can fail.
FAULTS: set = set()
FAULT_NAMES = ("dipole_gradient_sign",)


@contextlib.contextmanager
def inject_faults(*names):
    unknown = set(names) - set(FAULT_NAMES)
    if unknown:
        raise ValueError(f"unknown faults {sorted(unknown)}")
    saved = set(FAULTS)
    FAULTS.update(names)
    try:
        yield
    finally:
        FAULTS.clear()
        FAULTS.update(saved)


def dipole_gradient(dipole: AnnulusDipole, x) -> np.ndarray:
    p = np.asarray(x, float).reshape(-1, 2)
    d = dipole.direction - 1
    e = np.zeros(2)
    e[d] = 1.0
    q = p[:, 0] ** 2 + p[:, 1] ** 2
    r2, R2 = dipole.r**2, dipole.R**2
    out = np.zeros((len(p), 2))
    inner = q <= r2
    ann = (q > r2) & (q <= R2)
    out[inner] = (1.0 / R2 - 1.0 / r2) / TWO_PI * e
    pa, qa = p[ann], q[ann]
    # (id - 2 xhat xhat) e / |x|^2
    dip = e[None, :] - 2.0 * pa * pa[:, d:d + 1] / qa[:, None]
    out[ann] = (e[None, :] / R2 + dip / qa[:, None]) / TWO_PI
    if "dipole_gradient_sign" in FAULTS:
        out[ann] = -out[ann]
    return out


def green_flux_via_dipole(mu: DiscreteMeasure, r: float, R: float, tol: float = 1e-9) -> np.ndarray:
    """Boundary moment at radius r of the zero-flux solution on B_R, from the dipole pairing."""
    if mu.is_empty:
        return np.zeros(2)
    rad = np.hypot(mu.points[:, 0], mu.points[:, 1])
    if np.any(np.abs(rad - r) <= tol) or np.any(np.abs(rad - R) <= tol):
        raise PoissonError("atom on an interface circle")
    keep = rad < R
    p, m = mu.points[keep], mu.weights[keep]
    return -np.array([m @ dipole_value(AnnulusDipole(r, R, d), p) for d in (1, 2)])


def default_probe_points(n: int = 100, scale: float = 1.0, seed: int = 0) -> np.ndarray:
    """Deterministic probe set in the disk of radius ``scale``, without rng state."""
    k = np.arange(n) + 0.5
    rad = scale * np.sqrt(k / n)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    ang = golden * (k + seed)
    return np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])


def telescoping_check(radii, points=None, min_gap: float = 1e-6) -> float:
    """Max defect of the telescoping identity for annulus dipoles on a probe set.

    Points closer than ``min_gap`` (relative) to any interface circle are dropped.
    """
    radii = [float(v) for v in radii]
    if len(radii) < 2 or any(a <= b for a, b in zip(radii[:-1], radii[1:])) or radii[-1] <= 0:
        raise ValueError("radii must be strictly decreasing and positive")
    if points is None:
        points = default_probe_points(100, 1.2 * radii[0])
    p = np.asarray(points, float).reshape(-1, 2)
    rad = np.hypot(p[:, 0], p[:, 1])
    ok = np.all(np.abs(rad[:, None] - np.array(radii)[None, :]) > min_gap * radii[0], axis=1)
    p = p[ok]
    worst = 0.0
    for d in (1, 2):
        lhs = dipole_value(AnnulusDipole(radii[-1], radii[0], d), p)
        rhs = np.zeros(len(p))
        for a, b in zip(radii[:-1], radii[1:]):
            rhs += dipole_value(AnnulusDipole(b, a, d), p)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))) if len(p) else 0.0)
    return worst
