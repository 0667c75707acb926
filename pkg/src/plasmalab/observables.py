"""Fluctuation observables: linear statistics, the deterministic mean
shift, the Gaussian-cutoff angle term and its long/short split, the
loop (Ward) statistic, and local counts.

Test functions are radial profiles with closed-form derivatives; the map
entering the angle and loop machinery is h = dbar(f) / ddbar(V), built
analytically (no numerical differentiation here).  Pair sums exclude the
diagonal and replace near-coincident pairs by the analytic limit dh(z).

Wirtinger conventions: d = (d_x - i d_y)/2, dbar = (d_x + i d_y)/2,
Laplacian = 4 d dbar; for the Coulomb kernel d_z C(z) = -1/(2z).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba as nb
import numpy as np
from scipy.interpolate import RectBivariateSpline

from .equilibrium import EquilibriumMeasure, ExternalPotential

__all__ = [
    "TestFunction",
    "bump",
    "gauss_window",
    "HMap",
    "build_h",
    "ObservableSeries",
    "linear_statistic",
    "XfObservable",
    "y_term",
    "AngleMachinery",
    "loop_statistic",
    "wdef_residual",
    "local_count",
    "count_fluctuation_report",
]


# ---------------------------------------------------------------------------
# test functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestFunction:
    """Radial-profile test function f(z) = phi(u), u = |z - center|^2 / R^2.

    kind "bump": phi(u) = A exp(1 - 1/(1 - u)) on u < 1 (smooth, compactly
    supported); "gauss": phi(u) = A exp(-c u) truncated where it falls
    below 1e-16 (declared support radius R).
    """

    kind: str
    center: complex
    radius: float
    amplitude: float
    gauss_width: float = 0.25   # std devs as a fraction of R, "gauss" only

    def __post_init__(self):
        if self.kind not in ("bump", "gauss"):
            raise ValueError(f"unknown test function kind {self.kind!r}")
        if not (self.radius > 0 and np.isfinite(self.amplitude)):
            raise ValueError("bad test function parameters")

    @property
    def is_centered_radial(self) -> bool:
        return self.center == 0

    # -- radial profile and derivatives in u --------------------------------

    def _phi(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "bump":
            safe = np.where(u < 1.0, np.maximum(1.0 - u, 1e-300), 1.0)
            out = np.where(u < 1.0, np.exp(1.0 - 1.0 / safe), 0.0)
            return self.amplitude * out
        c = 1.0 / (2.0 * self.gauss_width**2)
        return self.amplitude * np.where(u < 1.0, np.exp(-c * u), 0.0)

    def _phi1(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "bump":
            safe = np.where(u < 1.0, np.maximum(1.0 - u, 1e-300), 1.0)
            return np.where(u < 1.0, -self._phi(u) / safe**2, 0.0)
        c = 1.0 / (2.0 * self.gauss_width**2)
        return np.where(u < 1.0, -c * self._phi(u), 0.0)

    def _phi2(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "bump":
            safe = np.where(u < 1.0, np.maximum(1.0 - u, 1e-300), 1.0)
            return np.where(u < 1.0, self._phi(u) * (1.0 / safe**4 - 2.0 / safe**3), 0.0)
        c = 1.0 / (2.0 * self.gauss_width**2)
        return np.where(u < 1.0, c * c * self._phi(u), 0.0)

    def _u(self, z: np.ndarray):
        return np.abs(z - self.center) ** 2 / self.radius**2

    @staticmethod
    def _as_z(pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return pts[:, 0] + 1j * pts[:, 1]

    # -- evaluators ----------------------------------------------------------

    def value(self, pts) -> np.ndarray:
        return self._phi(self._u(self._as_z(pts)))

    def value_z(self, z: np.ndarray) -> np.ndarray:
        return self._phi(self._u(np.asarray(z, dtype=complex)))

    def grad(self, pts) -> np.ndarray:
        z = self._as_z(pts)
        g = self._phi1(self._u(z)) * 2.0 * (z - self.center) / self.radius**2
        return np.column_stack([g.real, g.imag])

    def laplacian(self, pts) -> np.ndarray:
        z = self._as_z(pts)
        u = self._u(z)
        return (4.0 * u * self._phi2(u) + 4.0 * self._phi1(u)) / self.radius**2

    def dbar(self, z: np.ndarray) -> np.ndarray:
        """dbar f = phi'(u) (z - z0) / R^2."""
        z = np.asarray(z, dtype=complex)
        return self._phi1(self._u(z)) * (z - self.center) / self.radius**2

    def d2bar(self, z: np.ndarray) -> np.ndarray:
        """dbar dbar f = phi''(u) (z - z0)^2 / R^4."""
        z = np.asarray(z, dtype=complex)
        return self._phi2(self._u(z)) * (z - self.center) ** 2 / self.radius**4

    def ddbar(self, z: np.ndarray) -> np.ndarray:
        """d dbar f = Laplacian / 4."""
        z = np.asarray(z, dtype=complex)
        u = self._u(z)
        return (u * self._phi2(u) + self._phi1(u)) / self.radius**2

    # -- integrals and norms ---------------------------------------------------

    def _radial_quad(self, integrand: Callable, n: int = 400) -> float:
        tq, wq = np.polynomial.legendre.leggauss(n)
        r = 0.5 * self.radius * (tq + 1.0)
        w = 0.5 * self.radius * wq
        return float(np.sum(w * integrand(r) * 2.0 * math.pi * r))

    def integral(self) -> float:
        return self._radial_quad(lambda r: self._phi(r**2 / self.radius**2))

    def grad_sq_integral(self) -> float:
        """int |grad f|^2 dm."""
        def gsq(r):
            u = r**2 / self.radius**2
            return (2.0 * r * self._phi1(u) / self.radius**2) ** 2
        return self._radial_quad(gsq)

    def laplacian_integral(self) -> float:
        """int Laplacian(f) dm; vanishes for compact support."""
        def lap(r):
            u = r**2 / self.radius**2
            return (4.0 * u * self._phi2(u) + 4.0 * self._phi1(u)) / self.radius**2
        return self._radial_quad(lap)

    def norm_report(self, k: int = 3, n: int = 2000) -> dict:
        """Scaled norm sum_j b^j sup|grad^j f| with b the support radius;
        derivative sups estimated on a dense radial grid (j <= 2 analytic,
        j = 3 by differencing the Laplacian profile)."""
        r = np.linspace(0.0, self.radius * (1 - 1e-9), n)
        u = r**2 / self.radius**2
        sup = {0: float(np.max(np.abs(self._phi(u))))}
        if k >= 1:
            sup[1] = float(np.max(np.abs(2.0 * r * self._phi1(u) / self.radius**2)))
        if k >= 2:
            frr = (2.0 / self.radius**2) * (self._phi1(u) + 2.0 * u * self._phi2(u))
            fr_over_r = 2.0 * self._phi1(u) / self.radius**2
            sup[2] = float(np.max(np.abs(frr)) + np.max(np.abs(fr_over_r)))
        if k >= 3:
            lap = (4.0 * u * self._phi2(u) + 4.0 * self._phi1(u)) / self.radius**2
            dl = np.gradient(lap, r)
            sup[3] = float(np.max(np.abs(dl)))
        total = sum(self.radius**j * sup[j] for j in sorted(sup) if j <= k)
        return {"sups": sup, "norm": total, "b": self.radius}

    def descriptor(self) -> dict:
        return {"kind": self.kind, "center": [self.center.real, self.center.imag],
                "radius": self.radius, "amplitude": self.amplitude}


def bump(center=0.0, radius=0.5, amplitude=1.0) -> TestFunction:
    return TestFunction("bump", complex(center), radius, amplitude)


def gauss_window(center=0.0, radius=0.5, amplitude=1.0, width=0.25) -> TestFunction:
    return TestFunction("gauss", complex(center), radius, amplitude, gauss_width=width)


# ---------------------------------------------------------------------------
# the map h = dbar f / ddbar V
# ---------------------------------------------------------------------------

class HMap:
    """The map h = dbar f / ddbar V and its Wirtinger derivatives:

        dh    = ddbar f / q - dbar f dq / q^2,
        dbarh = dbar^2 f / q - dbar f conj(dq) / q^2,   q = ddbar V.

    Plain data (f, V) so instances cross process boundaries."""

    def __init__(self, f: TestFunction, V: ExternalPotential):
        self.f = f
        self.V = V
        self._grad_inf = None

    def h(self, z):
        z = np.asarray(z, dtype=complex)
        return self.f.dbar(z) / _potential_q(self.V, z)

    def dh(self, z):
        z = np.asarray(z, dtype=complex)
        q = _potential_q(self.V, z)
        return self.f.ddbar(z) / q - self.f.dbar(z) * _potential_dq(self.V, z) / q**2

    def dbarh(self, z):
        z = np.asarray(z, dtype=complex)
        q = _potential_q(self.V, z)
        return (self.f.d2bar(z) / q
                - self.f.dbar(z) * np.conj(_potential_dq(self.V, z)) / q**2)

    @property
    def grad_inf(self) -> float:
        """sup |grad h| bounded by sup(|dh| + |dbarh|) over supp f."""
        if self._grad_inf is None:
            f = self.f
            r = np.linspace(0, f.radius * (1 - 1e-9), 400)
            th = np.linspace(0, 2 * math.pi, 32, endpoint=False)
            zz = (f.center + r[:, None] * np.exp(1j * th)[None, :]).ravel()
            self._grad_inf = float(np.max(np.abs(self.dh(zz)) + np.abs(self.dbarh(zz))))
        return self._grad_inf


def _potential_q(V: ExternalPotential, z: np.ndarray):
    pts = np.column_stack([np.real(z), np.imag(z)])
    return V.laplacian(pts) / 4.0


def _potential_dq(V: ExternalPotential, z: np.ndarray):
    """d/dz of ddbar V; analytic for the radial potential families."""
    from .equilibrium import (ConditionalPotential, PerturbedPotential,
                              RadialPolynomialPotential,
                              RadialTabulatedPotential)
    if isinstance(V, RadialPolynomialPotential):
        # ddbar V = sum_k k^2 c_k r^(2k-2); d/dz of r^(2m) = m zbar r^(2m-2)
        r2 = np.abs(z) ** 2
        out = np.zeros_like(z)
        for k, c in enumerate(V.coeffs):
            if k >= 2:
                out += c * k * k * (k - 1) * np.conj(z) * r2 ** (k - 2)
        return out
    if isinstance(V, PerturbedPotential):
        base = _potential_dq(V.base, z)
        # ddbar f = f.ddbar; d(ddbar f) = d_z of it
        f = V.f
        u = np.abs(z - f.center) ** 2 / f.radius**2
        zc = z - f.center
        # d/dz [u phi2(u) + phi1(u)] / R^2 with du/dz = conj(zc)/R^2
        phi3 = _phi3(f, u)
        inner = (f._phi2(u) + u * phi3 + f._phi2(u)) * np.conj(zc) / f.radius**2
        return base + V.t * inner / f.radius**2
    if isinstance(V, ConditionalPotential):
        return (V.n_total / V.m_interior) * _potential_dq(V.base, z)
    if isinstance(V, RadialTabulatedPotential):
        r = np.abs(z)
        dlap = V._lap.derivative()(np.clip(r, V.rs[0], V.rs[-1]))
        safe = np.maximum(r, 1e-300)
        return (dlap / 4.0) * np.conj(z) / (2.0 * safe)
    raise ValueError(f"no analytic ddbar-derivative for {type(V).__name__}")


def _phi3(f: TestFunction, u):
    if f.kind == "bump":
        # with s = 1/(1-u): phi' = -phi s^2, phi'' = phi (s^4 - 2 s^3),
        # phi''' = phi (-s^6 + 6 s^5 - 6 s^4)
        safe = np.where(u < 1.0, np.maximum(1.0 - u, 1e-300), 1.0)
        s = 1.0 / safe
        return np.where(u < 1.0, f._phi(u) * (-s**6 + 6.0 * s**5 - 6.0 * s**4), 0.0)
    c = 1.0 / (2.0 * f.gauss_width**2)
    return np.where(u < 1.0, -(c**3) * f._phi(u), 0.0)


def build_h(f: TestFunction, V: ExternalPotential) -> HMap:
    return HMap(f, V)


# ---------------------------------------------------------------------------
# series container
# ---------------------------------------------------------------------------

@dataclass
class ObservableSeries:
    name: str
    values: np.ndarray
    thinning: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.size and not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite observable values")

    def __len__(self):
        return len(self.values)

    def to_csv(self, path, sidecar: Optional[dict] = None):
        sweeps = (1 + np.arange(len(self.values))) * self.thinning
        with open(path, "w") as fh:
            fh.write("sweep,value\n")
            for s, v in zip(sweeps, self.values):
                fh.write(f"{s},{v:.17g}\n")
        side = {"name": self.name, "thinning": self.thinning, **self.meta}
        if sidecar:
            side.update(sidecar)
        with open(str(path) + ".json", "w") as fh:
            json.dump(side, fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# linear statistic and mean shift
# ---------------------------------------------------------------------------

def linear_statistic(pts: np.ndarray, f: TestFunction, mu: EquilibriumMeasure,
                     n: Optional[int] = None, f_mean: Optional[float] = None) -> float:
    """X_f = sum_j f(z_j) - N int f dmu."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n = n if n is not None else pts.shape[0]
    if f_mean is None:
        f_mean = mu.integrate_f(f.value)
    return float(f.value(pts).sum() - n * f_mean)


class XfObservable:
    """Linear statistic with the equilibrium integral precomputed."""

    def __init__(self, f: TestFunction, mu: EquilibriumMeasure, n: int):
        self.f = f
        self.n = n
        self.f_mean = mu.integrate_f(f.value)

    def __call__(self, pts, energy=None) -> float:
        return float(self.f.value(pts).sum() - self.n * self.f_mean)


def y_term(f: TestFunction, V: ExternalPotential, n_r: int = 300,
           n_theta: int = 256) -> float:
    """Mean-shift integral (1/4pi) int Laplacian(f) log(Laplacian V) dm
    over the support of f."""
    tq, wq = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * f.radius * (tq + 1.0)
    wr = 0.5 * f.radius * wq
    th = 2.0 * math.pi * (np.arange(n_theta) + 0.5) / n_theta
    z = f.center + r[:, None] * np.exp(1j * th)[None, :]
    pts = np.column_stack([z.real.ravel(), z.imag.ravel()])
    lap_f = f.laplacian(pts).reshape(len(r), n_theta)
    lap_v = V.laplacian(pts).reshape(len(r), n_theta)
    if np.any(lap_v <= 0):
        raise ValueError("Laplacian of V must be positive on supp f")
    ang = (lap_f * np.log(lap_v)).mean(axis=1)
    return float(np.sum(wr * ang * 2.0 * math.pi * r) / (4.0 * math.pi))


# ---------------------------------------------------------------------------
# angle machinery
# ---------------------------------------------------------------------------

@nb.njit(cache=True)
def _angle_pair_sum(z: np.ndarray, hz: np.ndarray, dhz: np.ndarray,
                    theta: float, gauss_cut: int) -> float:
    """sum_{j != k} Re[kern(z_j, z_k)] with kern the (optionally Gaussian-
    damped) difference quotient; near-coincident pairs use Re dh."""
    n = z.size
    tot = 0.0
    two_t2 = 2.0 * theta * theta
    for j in range(n):
        for k in range(n):
            if k == j:
                continue
            d = z[j] - z[k]
            ad2 = d.real * d.real + d.imag * d.imag
            if ad2 < 1e-24:
                tot += dhz[j].real
                continue
            q = (hz[j] - hz[k]) / d
            if gauss_cut == 1:
                tot += math.exp(-ad2 / two_t2) * q.real
            else:
                tot += q.real
    return tot


class AngleMachinery:
    """Gaussian-cutoff angle statistic and its long/short split for a
    fixed (f, V, mu, theta).

    The empirical-empirical part is a pair sum; the cross term is the
    smooth field Re int Psi_minus(z, w) mu(dw) (precomputed on a grid and
    splined); the mu x mu constant is a one-time double quadrature.
    """

    def __init__(self, f: TestFunction, V: ExternalPotential,
                 mu: EquilibriumMeasure, theta: float, n: int,
                 n_r_inner: int = 64, n_phi_inner: int = 96,
                 pad_thetas: float = 6.0, spline_pts_per_theta: float = 8.0):
        self.f = f
        self.V = V
        self.mu = mu
        self.theta = float(theta)
        self.n = int(n)
        self.hmap = build_h(f, V)
        self.n_r_inner = n_r_inner
        self.n_phi_inner = n_phi_inner
        self.pad_thetas = pad_thetas
        self.spline_pts_per_theta = spline_pts_per_theta
        self._field_spline = None
        self._mumu: Optional[float] = None

    # -- inner quadrature: int Psi_minus(z, w) mu(dw) -----------------------

    def _support_radius(self) -> Optional[float]:
        if self.mu.kind == "radial":
            return float(self.mu.rs[-1])
        return None

    def _ray_limits(self, z: np.ndarray, eip: np.ndarray) -> np.ndarray:
        """Exit radius of the ray w = z - r e^{i phi} from the support disk
        (per (z, phi)); keeps the quadrature inside the density's support
        so the integrand stays smooth."""
        Rs = self._support_radius()
        if Rs is None:
            return np.full((z.size, eip.size), np.inf)
        proj = np.real(z[:, None] * np.conj(eip)[None, :])
        disc = Rs**2 - (np.abs(z) ** 2)[:, None] + proj**2
        inside = (np.abs(z) <= Rs)[:, None]
        rb = np.where(disc > 0, proj + np.sqrt(np.maximum(disc, 0.0)), 0.0)
        return np.where(inside, np.maximum(rb, 0.0), np.maximum(rb, 0.0) * (disc > 0) * (proj > 0))

    def cross_field_direct(self, z: np.ndarray, n_r: Optional[int] = None,
                           n_phi: Optional[int] = None,
                           chunk: int = 1024) -> np.ndarray:
        """Complex field int Psi_minus(z, w) mu(dw) by polar quadrature
        around each z.  The kernel's 1/(z-w) cancels against the polar
        Jacobian and the radial range stops at the support boundary, so
        the integrand is smooth.  Evaluated in chunks to bound memory."""
        z = np.asarray(z, dtype=complex).ravel()
        n_r = n_r or self.n_r_inner
        n_phi = n_phi or self.n_phi_inner
        h = self.hmap.h
        tq, wq = np.polynomial.legendre.leggauss(n_r)
        phi = 2.0 * math.pi * (np.arange(n_phi) + 0.5) / n_phi
        eip = np.exp(1j * phi)
        out = np.empty(z.size, dtype=complex)
        hz_all = h(z)
        for lo in range(0, z.size, chunk):
            zc = z[lo:lo + chunk]
            rmax = np.minimum(self._ray_limits(zc, eip), 8.0 * self.theta)
            r = 0.5 * rmax[:, None, :] * (tq[None, :, None] + 1.0)
            wr = 0.5 * rmax[:, None, :] * wq[None, :, None]
            w = zc[:, None, None] - r * eip[None, None, :]
            hw = h(w.ravel()).reshape(w.shape)
            gauss = np.exp(-(r**2) / (2.0 * self.theta**2))
            rho = self.mu.density_at(
                np.column_stack([w.real.ravel(), w.imag.ravel()])).reshape(w.shape)
            integrand = wr * gauss * (hz_all[lo:lo + chunk, None, None] - hw) \
                * np.conj(eip)[None, None, :] * rho
            out[lo:lo + chunk] = integrand.sum(axis=(1, 2)) * 2.0 * math.pi / n_phi
        return out

    def _ensure_field(self):
        if self._field_spline is not None:
            return
        pad = self.pad_thetas * self.theta
        R = self.f.radius + pad
        c = self.f.center
        n_pts = int(math.ceil(2.0 * R * self.spline_pts_per_theta / self.theta)) + 1
        n_pts = min(max(n_pts, 81), 401)
        xs = np.linspace(c.real - R, c.real + R, n_pts)
        ys = np.linspace(c.imag - R, c.imag + R, n_pts)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        vals = self.cross_field_direct((X + 1j * Y).ravel()).real.reshape(X.shape)
        self._field_spline = RectBivariateSpline(xs, ys, vals, kx=3, ky=3)
        self._field_box = (xs[0], xs[-1], ys[0], ys[-1])

    def cross_field(self, pts: np.ndarray) -> np.ndarray:
        """Re int Psi_minus(z_j, w) mu(dw) at particle positions (splined;
        zero outside the padded support of h)."""
        self._ensure_field()
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        x0, x1, y0, y1 = self._field_box
        inside = ((pts[:, 0] > x0) & (pts[:, 0] < x1)
                  & (pts[:, 1] > y0) & (pts[:, 1] < y1))
        out = np.zeros(pts.shape[0])
        if np.any(inside):
            out[inside] = self._field_spline.ev(pts[inside, 0], pts[inside, 1])
        return out

    def _outer_nodes(self, n_r: int, n_phi: int):
        """Polar nodes around the center of f covering supp(h) + Gaussian
        reach, clipped at the support boundary of mu; returns complex
        nodes and quadrature weights (area measure)."""
        pad = self.f.radius + 8.0 * self.theta
        c = self.f.center
        tq, wq = np.polynomial.legendre.leggauss(n_r)
        phi = 2.0 * math.pi * (np.arange(n_phi) + 0.5) / n_phi
        eip = np.exp(1j * phi)
        Rs = self._support_radius()
        if Rs is None:
            rmax = np.full(n_phi, pad)
        else:
            p = np.real(np.conj(c) * eip)
            exit_r = -p + np.sqrt(np.maximum(Rs**2 - abs(c) ** 2 + p**2, 0.0))
            rmax = np.minimum(pad, exit_r)
        r = 0.5 * rmax[None, :] * (tq[:, None] + 1.0)
        wr = 0.5 * rmax[None, :] * wq[:, None]
        z = c + r * eip[None, :]
        w_area = wr * r * (2.0 * math.pi / n_phi)
        return z.ravel(), w_area.ravel()

    def mumu(self) -> float:
        """Re iint Psi_minus dmu dmu by outer polar quadrature over the
        support of h against the inner field."""
        if self._mumu is None:
            z, w_area = self._outer_nodes(96, 96)
            field = self.cross_field_direct(z).real
            rho = self.mu.density_at(np.column_stack([z.real, z.imag]))
            self._mumu = float(np.sum(w_area * rho * field))
        return self._mumu

    # -- public statistics ---------------------------------------------------

    def angle_term(self, pts: np.ndarray, energy=None) -> float:
        """A_hat = (N/2) Re iint_{z != w} Psi_minus d(mu_hat - mu)^2."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        z = pts[:, 0] + 1j * pts[:, 1]
        hz = self.hmap.h(z)
        dhz = self.hmap.dh(z)
        pair = _angle_pair_sum(z, hz, dhz, self.theta, 1)
        n = self.n
        return float(pair / (2.0 * n) - self.cross_field(pts).sum()
                     + 0.5 * n * self.mumu())

    def a_plus_minus(self, pts: np.ndarray, n_r: int = 160, n_phi: int = 128):
        """(A_minus, A_plus): the Gaussian-local and long-range halves of
        (N/2) iint_{z != w} (h(z)-h(w))/(z-w) d(mu_hat - mu)^2, complex.

        Pair sums and cross terms of both halves are evaluated directly
        (shared polar nodes for the cross terms); their sum reproduces the
        unsplit statistic to quadrature accuracy.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        n = self.n
        z = pts[:, 0] + 1j * pts[:, 1]
        hz = self.hmap.h(z)
        dhz = self.hmap.dh(z)

        minus_pair = _pair_sum_complex(z, hz, dhz, self.theta, 1)
        plus_pair = _pair_sum_complex(z, hz, dhz, self.theta, 2)

        minus_cross, full_cross = self._split_cross(z, n_r, n_phi)
        plus_cross = full_cross - minus_cross
        minus_mumu, full_mumu = self._split_mumu(n_r, n_phi)

        a_minus = (minus_pair / (2.0 * n) - minus_cross.sum() + 0.5 * n * minus_mumu)
        a_plus = (plus_pair / (2.0 * n) - plus_cross.sum()
                  + 0.5 * n * (full_mumu - minus_mumu))
        return complex(a_minus), complex(a_plus)

    def unsplit_term(self, pts: np.ndarray, n_r: int = 160, n_phi: int = 128) -> complex:
        """(N/2) iint_{z != w} (h(z)-h(w))/(z-w) d(mu_hat - mu)^2 evaluated
        directly with the undamped kernel."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        n = self.n
        z = pts[:, 0] + 1j * pts[:, 1]
        hz = self.hmap.h(z)
        dhz = self.hmap.dh(z)
        full_pair = _pair_sum_complex(z, hz, dhz, self.theta, 0)
        _, full_cross = self._split_cross(z, n_r, n_phi)
        _, full_mumu = self._split_mumu(n_r, n_phi)
        return complex(full_pair / (2.0 * n) - full_cross.sum() + 0.5 * n * full_mumu)

    def _split_cross(self, z, n_r, n_phi, chunk: int = 128):
        """int kern(z_j, w) mu(dw) for the Gaussian-damped and undamped
        difference quotients on shared polar nodes, radial range clipped
        at the support boundary."""
        z = np.asarray(z, dtype=complex)
        tq, wq = np.polynomial.legendre.leggauss(n_r)
        phi = 2.0 * math.pi * (np.arange(n_phi) + 0.5) / n_phi
        eip = np.exp(1j * phi)
        h = self.hmap.h
        hz_all = h(z)
        minus = np.empty(z.size, dtype=complex)
        full = np.empty(z.size, dtype=complex)
        for lo in range(0, z.size, chunk):
            zc = z[lo:lo + chunk]
            rb = self._ray_limits(zc, eip)                     # (nc, nphi)
            r = 0.5 * rb[:, None, :] * (tq[None, :, None] + 1.0)
            wr = 0.5 * rb[:, None, :] * wq[None, :, None]
            w = zc[:, None, None] - r * eip[None, None, :]
            hw = h(w.ravel()).reshape(w.shape)
            rho = self.mu.density_at(
                np.column_stack([w.real.ravel(), w.imag.ravel()])).reshape(w.shape)
            base = wr * (hz_all[lo:lo + chunk, None, None] - hw) \
                * np.conj(eip)[None, None, :] * rho
            gauss = np.exp(-(r**2) / (2.0 * self.theta**2))
            scale = 2.0 * math.pi / n_phi
            full[lo:lo + chunk] = base.sum(axis=(1, 2)) * scale
            minus[lo:lo + chunk] = (gauss * base).sum(axis=(1, 2)) * scale
        return minus, full

    def _split_mumu(self, n_r, n_phi):
        """(iint Psi_minus dmu dmu, iint unsplit dmu dmu).

        The Gaussian half integrates the inner field over supp(h) plus the
        Gaussian reach; the unsplit double integral reduces exactly to
        2 int h(z) C_mu(z) mu(dz) with C_mu the (radial) Cauchy transform.
        """
        key = "_split_mumu_cache"
        if not hasattr(self, key):
            z, w_area = self._outer_nodes(72, 72)
            minus_f, _ = self._split_cross(z, n_r, n_phi)
            rho = self.mu.density_at(np.column_stack([z.real, z.imag]))
            minus_val = complex(np.sum(w_area * rho * minus_f))
            hz = self.hmap.h(z)
            cz = self.mu.cauchy_transform(z)
            full_val = complex(2.0 * np.sum(w_area * rho * hz * cz))
            setattr(self, key, (minus_val, full_val))
        return getattr(self, key)


@nb.njit(cache=True)
def _pair_sum_complex(z, hz, dhz, theta, gauss_cut):
    """Pair sum of the difference quotient: gauss_cut 0 = undamped,
    1 = Gaussian factor, 2 = complementary (1 - Gaussian) factor."""
    n = z.size
    tot = 0.0 + 0.0j
    two_t2 = 2.0 * theta * theta
    for j in range(n):
        for k in range(n):
            if k == j:
                continue
            d = z[j] - z[k]
            ad2 = d.real * d.real + d.imag * d.imag
            if ad2 < 1e-24:
                if gauss_cut != 2:   # complementary factor vanishes at 0
                    tot += dhz[j]
                continue
            q = (hz[j] - hz[k]) / d
            if gauss_cut == 1:
                tot += math.exp(-ad2 / two_t2) * q
            elif gauss_cut == 2:
                tot += -math.expm1(-ad2 / two_t2) * q
            else:
                tot += q
    return tot


# ---------------------------------------------------------------------------
# loop (Ward) statistic and the exact defect identity
# ---------------------------------------------------------------------------

def loop_statistic(pts: np.ndarray, v: Callable, dv: Callable,
                   V: ExternalPotential, beta: float,
                   n: Optional[int] = None) -> complex:
    """W = -sum_{j != k} (v_j - v_k) d_z C(z_j - z_k) + (1/beta) sum_j dv(z_j)
    - N sum_j v(z_j) dV(z_j), Coulomb kernel (d_z C = -1/(2 z)).

    Its expectation under the Gibbs measure vanishes for translation-
    invariant kernels.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n = n if n is not None else pts.shape[0]
    z = pts[:, 0] + 1j * pts[:, 1]
    vz = v(z)
    d = z[:, None] - z[None, :]
    np.fill_diagonal(d, 1.0)
    q = (vz[:, None] - vz[None, :]) / d
    np.fill_diagonal(q, 0.0)
    pair = 0.5 * q.sum()
    return complex(pair + dv(z).sum() / beta - n * np.sum(vz * V.d_z(pts)))


def wdef_residual(pts: np.ndarray, f: TestFunction, V: ExternalPotential,
                  mu: EquilibriumMeasure, beta: float,
                  n: Optional[int] = None, mode: str = "quadrature",
                  machinery: Optional[AngleMachinery] = None) -> float:
    """Residual of the exact rewrite of the linear statistic:

        X_f = -(1/N) W_h + (1/(N beta)) sum_k dh(z_k)
              + (N/2) iint_{z != w} (h(z)-h(w))/(z-w) d(mu_hat-mu)^2.

    mode "circular-law" uses the analytic fields of the quadratic
    potential (Cauchy transform zbar, mu x mu term -2 int f dmu); mode
    "quadrature" evaluates every equilibrium integral numerically.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n = n if n is not None else pts.shape[0]
    z = pts[:, 0] + 1j * pts[:, 1]
    hmap = build_h(f, V)
    hz = hmap.h(z)
    dhz = hmap.dh(z)

    W = loop_statistic(pts, hmap.h, hmap.dh, V, beta, n)
    pair = _pair_sum_complex(z, hz, dhz, 1.0, 0)

    if mode == "circular-law":
        # analytic fields of V = |z|^2: Cauchy transform zbar on the disk,
        # int h(w)/(z-w) dmu = f(z), mu x mu term -2 int f dmu
        f_mean = f.integral() / math.pi
        cross = hz * np.conj(z) - f.value_z(z)
        mumu = -2.0 * f_mean
    else:
        f_mean = mu.integrate_f(f.value)
        mach = machinery or AngleMachinery(f, V, mu, theta=1.0, n=n)
        _, cross_arr = mach._split_cross(z, 160, 128)
        cross = cross_arr
        _, mumu = mach._split_mumu(160, 128)

    unsplit = pair / (2.0 * n) - np.sum(cross) + 0.5 * n * mumu
    lhs = f.value(pts).sum() - n * f_mean
    rhs = -W / n + dhz.sum() / (n * beta) + unsplit
    return float(abs(lhs - rhs))


# ---------------------------------------------------------------------------
# local counts
# ---------------------------------------------------------------------------

def local_count(pts: np.ndarray, center, radius: float) -> int:
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    c = np.asarray(center, dtype=float)
    return int(np.sum(np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1]) <= radius))


def count_fluctuation_report(counts) -> dict:
    """Variance-to-mean ratio of a count series (1 for Poisson;
    sub-Poissonian counts of the plasma give ratios well below 1)."""
    x = counts.values if isinstance(counts, ObservableSeries) else np.asarray(counts, dtype=float)
    mean = float(np.mean(x))
    var = float(np.var(x, ddof=1))
    n = len(x)
    # delta-method error of the ratio assuming weak dependence
    m4 = float(np.mean((x - mean) ** 4))
    var_of_var = max(m4 - var**2, 0.0) / n
    ratio = var / mean if mean > 0 else float("nan")
    ratio_err = (math.sqrt(var_of_var) / mean if mean > 0 else float("nan"))
    return {"mean": mean, "var": var, "ratio": ratio, "ratio_stderr": ratio_err,
            "n": n}
