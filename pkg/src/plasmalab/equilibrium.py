"""Equilibrium measures, Robin constants, minimized energies, effective
potentials, and conditional potentials.

The minimized functional is

    I(mu) = iint K(z - w) mu(dz) mu(dw) + int V dmu

over probability measures, with K the Coulomb (-log) or screened (K0)
kernel.  For radial potentials everything reduces to one-dimensional
quadrature through the circle average of the kernel: the average of
-log|z - w| over |w| = s is -log max(|z|, s), and the average of
K0(m|z - w|) is K0(m max) I0(m min).  The minimizer's density on its
support is Laplacian(V)/(4 pi) for the Coulomb kernel, and
(Laplacian(Q) + m^2 (2 c - Q))/(4 pi) for the screened kernel.

A general 2D grid solver (accelerated projected gradient on the
probability simplex, quadratic form applied by FFT convolution) backs the
non-radial cases and cross-checks the radial fast path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.special as sp
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq
from scipy.signal import fftconvolve

from .geometry import PointConfig

__all__ = [
    "EquilibriumError",
    "ExternalPotential",
    "RadialPolynomialPotential",
    "RadialTabulatedPotential",
    "PerturbedPotential",
    "ConditionalPotential",
    "GridSpec",
    "EquilibriumMeasure",
    "solve_equilibrium_radial",
    "solve_equilibrium_grid",
    "energy_functional",
    "uniform_torus_energy",
    "entropy_integral",
    "EffectivePotential",
    "effective_potential",
    "conditional_potential",
    "log_cell_average_constant",
]


class EquilibriumError(RuntimeError):
    """Solver failure; carries the bracket or iterate state."""


# ---------------------------------------------------------------------------
# external potentials
# ---------------------------------------------------------------------------

class ExternalPotential:
    """Confining potential with evaluator, Laplacian, and z-derivative."""

    is_radial = False

    def value(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def laplacian(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def d_z(self, pts: np.ndarray) -> np.ndarray:
        """Wirtinger derivative dV/dz as a complex array."""
        raise NotImplementedError

    def growth_ok(self) -> bool:
        """Confinement: V(z) - (2 + eps) log|z| bounded below."""
        raise NotImplementedError

    def descriptor(self) -> dict:
        raise NotImplementedError


def _as_points(pts) -> np.ndarray:
    arr = np.asarray(pts, dtype=float)
    return np.atleast_2d(arr)


@dataclass(frozen=True)
class RadialPolynomialPotential(ExternalPotential):
    """V(z) = sum_k coeffs[k] |z|^(2k); coeffs[0] is the constant term."""

    coeffs: tuple

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        if len(self.coeffs) < 2 or self.coeffs[-1] <= 0:
            raise ValueError("need a positive leading coefficient and degree >= 2")

    is_radial = True

    def radial_value(self, r):
        r2 = np.asarray(r, dtype=float) ** 2
        out = np.zeros_like(r2)
        for k in range(len(self.coeffs) - 1, -1, -1):
            out = out * r2 + self.coeffs[k]
        return out

    def radial_laplacian(self, r):
        # Laplacian of r^(2k) is 4 k^2 r^(2k-2)
        r2 = np.asarray(r, dtype=float) ** 2
        out = np.zeros_like(r2)
        for k in range(len(self.coeffs) - 1, 0, -1):
            out = out * r2 + 4.0 * k * k * self.coeffs[k]
        return out

    def value(self, pts):
        pts = _as_points(pts)
        return self.radial_value(np.hypot(pts[:, 0], pts[:, 1]))

    def laplacian(self, pts):
        pts = _as_points(pts)
        return self.radial_laplacian(np.hypot(pts[:, 0], pts[:, 1]))

    def d_z(self, pts):
        pts = _as_points(pts)
        z = pts[:, 0] + 1j * pts[:, 1]
        r2 = np.abs(z) ** 2
        s = np.zeros_like(r2)
        for k in range(len(self.coeffs) - 1, 0, -1):
            s = s * r2 + k * self.coeffs[k]
        return np.conj(z) * s

    def coulomb_mass_inside(self, R: float) -> float:
        """Closed-form mass of the Coulomb candidate density
        Laplacian(V)/(4 pi) on the disk of radius R: sum_k k c_k R^(2k)."""
        return float(sum(k * c * R ** (2 * k) for k, c in enumerate(self.coeffs)))

    def growth_ok(self) -> bool:
        return True

    def descriptor(self) -> dict:
        return {"kind": "radial-polynomial", "coeffs": list(self.coeffs)}


class RadialTabulatedPotential(ExternalPotential):
    """Radial potential given by tables of V(r) and Laplacian V(r).

    Values beyond the table are extended by the last polynomial trend of
    the base potential when provided, else by cubic extrapolation.
    """

    is_radial = True

    def __init__(self, rs, values, laplacians, tail: Optional[ExternalPotential] = None):
        self.rs = np.asarray(rs, dtype=float)
        self._v = PchipInterpolator(self.rs, np.asarray(values, dtype=float), extrapolate=True)
        self._lap = PchipInterpolator(self.rs, np.asarray(laplacians, dtype=float), extrapolate=True)
        self.tail = tail

    def radial_value(self, r):
        r = np.asarray(r, dtype=float)
        out = self._v(np.clip(r, self.rs[0], self.rs[-1]))
        if self.tail is not None:
            beyond = r > self.rs[-1]
            if np.any(beyond):
                shift = self._v(self.rs[-1]) - self.tail.radial_value(self.rs[-1])
                out = np.where(beyond, self.tail.radial_value(r) + shift, out)
        return out

    def radial_laplacian(self, r):
        r = np.asarray(r, dtype=float)
        out = self._lap(np.clip(r, self.rs[0], self.rs[-1]))
        if self.tail is not None:
            beyond = r > self.rs[-1]
            if np.any(beyond):
                out = np.where(beyond, self.tail.radial_laplacian(r), out)
        return out

    def value(self, pts):
        pts = _as_points(pts)
        return self.radial_value(np.hypot(pts[:, 0], pts[:, 1]))

    def laplacian(self, pts):
        pts = _as_points(pts)
        return self.radial_laplacian(np.hypot(pts[:, 0], pts[:, 1]))

    def d_z(self, pts):
        pts = _as_points(pts)
        z = pts[:, 0] + 1j * pts[:, 1]
        r = np.abs(z)
        dr = self._v.derivative()(np.clip(r, self.rs[0], self.rs[-1]))
        # dV/dz = V'(r) * conj(z) / (2 r)
        safe = np.maximum(r, 1e-300)
        return np.conj(z) * dr / (2.0 * safe)

    def growth_ok(self) -> bool:
        return self.tail.growth_ok() if self.tail is not None else True

    def descriptor(self) -> dict:
        return {"kind": "radial-tabulated", "r_max": float(self.rs[-1])}


class PerturbedPotential(ExternalPotential):
    """V + t*f for a base potential and a compactly supported test function."""

    def __init__(self, base: ExternalPotential, f, t: float):
        self.base = base
        self.f = f
        self.t = float(t)
        self.is_radial = base.is_radial and getattr(f, "is_centered_radial", False)

    def radial_value(self, r):
        r = np.asarray(r, dtype=float)
        pts = np.column_stack([r, np.zeros_like(r)])
        return self.base.radial_value(r) + self.t * self.f.value(pts)

    def radial_laplacian(self, r):
        r = np.asarray(r, dtype=float)
        pts = np.column_stack([r, np.zeros_like(r)])
        return self.base.radial_laplacian(r) + self.t * self.f.laplacian(pts)

    def value(self, pts):
        return self.base.value(pts) + self.t * self.f.value(_as_points(pts))

    def laplacian(self, pts):
        return self.base.laplacian(pts) + self.t * self.f.laplacian(_as_points(pts))

    def d_z(self, pts):
        return self.base.d_z(pts) + self.t * self.f.d_z(_as_points(pts))

    def growth_ok(self) -> bool:
        return self.base.growth_ok()

    def descriptor(self) -> dict:
        return {"kind": "perturbed", "base": self.base.descriptor(),
                "f": self.f.descriptor(), "t": self.t}


class ConditionalPotential(ExternalPotential):
    """Effective potential of the gas inside a disk given frozen exterior
    particles: W(w) = (N/M) (V(w) - (2/N) sum_k log|w - zhat_k|) on the
    disk, +inf outside.

    The exterior sum is harmonic inside the disk, so the conditional
    equilibrium density there is (N/M) times the global one.
    """

    is_radial = False

    def __init__(self, base: ExternalPotential, exterior: np.ndarray,
                 center, radius: float, n_total: int):
        exterior = np.atleast_2d(np.asarray(exterior, dtype=float))
        if exterior.size == 0:
            exterior = np.zeros((0, 2))
        self.base = base
        self.exterior = exterior
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.n_total = int(n_total)
        self.m_interior = self.n_total - exterior.shape[0]
        if self.m_interior < 1:
            raise EquilibriumError("no interior particles left (M = 0)")
        d = np.hypot(exterior[:, 0] - self.center[0], exterior[:, 1] - self.center[1])
        if exterior.shape[0] and d.min() < self.radius:
            raise ValueError("exterior particles must lie outside the disk")

    def _log_sum(self, pts):
        pts = _as_points(pts)
        if self.exterior.shape[0] == 0:
            return np.zeros(pts.shape[0])
        dx = pts[:, 0][:, None] - self.exterior[:, 0][None, :]
        dy = pts[:, 1][:, None] - self.exterior[:, 1][None, :]
        return np.log(np.hypot(dx, dy)).sum(axis=1)

    def inside(self, pts):
        pts = _as_points(pts)
        return np.hypot(pts[:, 0] - self.center[0], pts[:, 1] - self.center[1]) <= self.radius

    def value(self, pts):
        pts = _as_points(pts)
        scale = self.n_total / self.m_interior
        vals = scale * (self.base.value(pts) - (2.0 / self.n_total) * self._log_sum(pts))
        return np.where(self.inside(pts), vals, np.inf)

    def laplacian(self, pts):
        pts = _as_points(pts)
        scale = self.n_total / self.m_interior
        return np.where(self.inside(pts), scale * self.base.laplacian(pts), 0.0)

    def d_z(self, pts):
        pts = _as_points(pts)
        z = pts[:, 0] + 1j * pts[:, 1]
        scale = self.n_total / self.m_interior
        if self.exterior.shape[0]:
            zh = self.exterior[:, 0] + 1j * self.exterior[:, 1]
            csum = (1.0 / (z[:, None] - zh[None, :])).sum(axis=1)
        else:
            csum = np.zeros_like(z)
        return scale * (self.base.d_z(pts) - csum / self.n_total)

    def growth_ok(self) -> bool:
        return True  # hard wall at the disk boundary

    def descriptor(self) -> dict:
        return {"kind": "conditional", "base": self.base.descriptor(),
                "center": self.center.tolist(), "radius": self.radius,
                "n_total": self.n_total, "m_interior": self.m_interior}


# ---------------------------------------------------------------------------
# circle-averaged kernels (radial reduction)
# ---------------------------------------------------------------------------

def _kbar_coulomb(s, r):
    return -np.log(np.maximum(np.maximum(s, r), 1e-300))


def _kbar_yukawa(s, r, ell):
    """Circle average of K0(|z - w|/ell): K0(max/ell) I0(min/ell), scaled
    Bessels to stay finite for small ell."""
    m = 1.0 / ell
    hi = np.maximum(s, r) * m
    lo = np.minimum(s, r) * m
    hi = np.maximum(hi, 1e-300)
    return sp.k0e(hi) * sp.i0e(lo) * np.exp(lo - hi)


def _kbar(s, r, interaction: str, ell: Optional[float]):
    if interaction == "coulomb":
        return _kbar_coulomb(s, r)
    if interaction == "yukawa":
        return _kbar_yukawa(s, r, ell)
    raise ValueError(f"radial reduction undefined for {interaction!r}")


# ---------------------------------------------------------------------------
# equilibrium measure container
# ---------------------------------------------------------------------------

@dataclass
class EquilibriumMeasure:
    """Equilibrium measure with support descriptor, density, Robin constant
    c_V, minimized energy I_V, and entropy integral."""

    kind: str                      # "radial" | "grid" | "uniform-torus"
    interaction: str               # "coulomb" | "yukawa" | "torus_yukawa"
    ell: Optional[float]
    support: dict
    c_V: float
    I_V: float
    entropy: float
    el_residual: float
    # radial representation
    rs: Optional[np.ndarray] = None
    rho: Optional[np.ndarray] = None
    # grid representation
    grid_x: Optional[np.ndarray] = None
    grid_y: Optional[np.ndarray] = None
    masses: Optional[np.ndarray] = None
    torus_side: Optional[float] = None
    converged: bool = True

    def __post_init__(self):
        if self.kind == "radial":
            self._rho_interp = PchipInterpolator(self.rs, self.rho, extrapolate=False)
            cdf = _radial_cdf(self.rs, self.rho)
            self._cdf_vals = cdf
            self._ppf = PchipInterpolator(*_monotone_pairs(cdf, self.rs), extrapolate=False)

    # -- densities ---------------------------------------------------------

    def density_radial(self, r):
        r = np.asarray(r, dtype=float)
        out = self._rho_interp(np.clip(r, self.rs[0], self.rs[-1]))
        out = np.where((r >= self.rs[0]) & (r <= self.rs[-1]), out, 0.0)
        return np.maximum(np.nan_to_num(out, nan=0.0), 0.0)

    def density_at(self, pts):
        pts = _as_points(pts)
        if self.kind == "radial":
            return self.density_radial(np.hypot(pts[:, 0], pts[:, 1]))
        if self.kind == "uniform-torus":
            return np.full(pts.shape[0], 1.0 / self.torus_side**2)
        h = self.grid_x[1] - self.grid_x[0]
        ix = np.clip(np.round((pts[:, 0] - self.grid_x[0]) / h).astype(int), 0, len(self.grid_x) - 1)
        iy = np.clip(np.round((pts[:, 1] - self.grid_y[0]) / h).astype(int), 0, len(self.grid_y) - 1)
        return self.masses[ix, iy] / h**2

    def mass_within(self, r):
        """Radial CDF M(r); the Cauchy transform of a radial measure is
        M(|z|)/z."""
        r = np.asarray(r, dtype=float)
        return np.interp(r, self.rs, self._cdf_vals)

    def cauchy_transform(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        r = np.abs(z)
        safe = np.where(r > 0, z, 1.0)
        return np.where(r > 0, self.mass_within(r) / safe, 0.0)

    # -- integrals ----------------------------------------------------------

    def integrate_f(self, f: Callable[[np.ndarray], np.ndarray], n_theta: int = 256,
                    n_r: int = 400) -> float:
        """int f dmu by Gauss-Legendre in r and theta (radial kind) or a
        grid sum."""
        if self.kind == "radial":
            tr, wr = np.polynomial.legendre.leggauss(n_r)
            r = 0.5 * (tr + 1.0) * self.rs[-1]
            wr = 0.5 * wr * self.rs[-1]
            tt = 2.0 * math.pi * (np.arange(n_theta) + 0.5) / n_theta
            pts_x = r[:, None] * np.cos(tt)[None, :]
            pts_y = r[:, None] * np.sin(tt)[None, :]
            vals = f(np.column_stack([pts_x.ravel(), pts_y.ravel()])).reshape(len(r), n_theta)
            ang = vals.mean(axis=1)
            return float(np.sum(wr * ang * self.density_radial(r) * 2.0 * math.pi * r))
        if self.kind == "uniform-torus":
            b = self.torus_side
            n = 256
            xs = -b / 2 + b * (np.arange(n) + 0.5) / n
            X, Y = np.meshgrid(xs, xs, indexing="ij")
            vals = f(np.column_stack([X.ravel(), Y.ravel()]))
            return float(vals.mean())
        X, Y = np.meshgrid(self.grid_x, self.grid_y, indexing="ij")
        vals = f(np.column_stack([X.ravel(), Y.ravel()])).reshape(self.masses.shape)
        return float(np.sum(vals * self.masses))

    def total_mass(self) -> float:
        if self.kind == "radial":
            return float(self._cdf_vals[-1])
        if self.kind == "uniform-torus":
            return 1.0
        return float(self.masses.sum())

    # -- sampling ------------------------------------------------------------

    def stratified_sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """One point per equal-mass radial cell (uniform angle), or a
        jittered lattice on the torus."""
        if self.kind == "uniform-torus":
            b = self.torus_side
            k = int(math.floor(math.sqrt(n)))
            pts = []
            if k * k == n:
                cell = b / k
                for i in range(k):
                    for j in range(k):
                        pts.append([-b / 2 + (i + rng.uniform()) * cell,
                                    -b / 2 + (j + rng.uniform()) * cell])
                return np.asarray(pts)
            return rng.uniform(-b / 2, b / 2, size=(n, 2))
        u = (np.arange(n) + rng.uniform(size=n)) / n
        r = self._ppf(np.clip(u * self._cdf_vals[-1], self._cdf_vals[0], self._cdf_vals[-1]))
        r = np.nan_to_num(r, nan=self.rs[-1])
        th = rng.uniform(0.0, 2.0 * math.pi, size=n)
        return np.column_stack([r * np.cos(th), r * np.sin(th)])

    # -- serialization --------------------------------------------------------

    def to_json(self) -> str:
        payload = {
            "kind": self.kind,
            "interaction": self.interaction,
            "ell": self.ell,
            "support": self.support,
            "c_V": self.c_V,
            "I_V": self.I_V,
            "entropy": self.entropy,
            "el_residual": self.el_residual,
            "converged": self.converged,
        }
        if self.kind == "radial":
            payload["rs"] = self.rs.tolist()
            payload["rho"] = self.rho.tolist()
        elif self.kind == "grid":
            payload["grid_x"] = self.grid_x.tolist()
            payload["grid_y"] = self.grid_y.tolist()
            payload["masses"] = self.masses.tolist()
        elif self.kind == "uniform-torus":
            payload["torus_side"] = self.torus_side
        return json.dumps(payload)

    @staticmethod
    def from_json(text: str) -> "EquilibriumMeasure":
        d = json.loads(text)
        kw = dict(kind=d["kind"], interaction=d["interaction"], ell=d["ell"],
                  support=d["support"], c_V=d["c_V"], I_V=d["I_V"],
                  entropy=d["entropy"], el_residual=d["el_residual"],
                  converged=d.get("converged", True))
        if d["kind"] == "radial":
            kw["rs"] = np.asarray(d["rs"])
            kw["rho"] = np.asarray(d["rho"])
        elif d["kind"] == "grid":
            kw["grid_x"] = np.asarray(d["grid_x"])
            kw["grid_y"] = np.asarray(d["grid_y"])
            kw["masses"] = np.asarray(d["masses"])
        elif d["kind"] == "uniform-torus":
            kw["torus_side"] = d["torus_side"]
        return EquilibriumMeasure(**kw)


def uniform_torus_measure(side: float = 1.0, ell: float = 0.1) -> EquilibriumMeasure:
    """The torus gas minimizer: the uniform probability measure."""
    energy = 2.0 * math.pi * ell**2 / side**2
    return EquilibriumMeasure(
        kind="uniform-torus", interaction="torus_yukawa", ell=ell,
        support={"kind": "torus", "side": side}, c_V=energy, I_V=energy,
        entropy=math.log(1.0 / side**2), el_residual=0.0, torus_side=side)


def _radial_cdf(rs, rho):
    integrand = rho * 2.0 * math.pi * rs
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(rs))])
    return cdf


def _monotone_pairs(x, y):
    """Strictly increasing (x, y) pairs for inverse interpolation."""
    keep = np.concatenate([[True], np.diff(x) > 1e-15])
    return x[keep], np.asarray(y)[keep]


# ---------------------------------------------------------------------------
# radial solver
# ---------------------------------------------------------------------------

def _radial_potential_field(rs_eval, rs, rho, interaction, ell):
    """U(s) = int Kbar(s, r) rho(r) 2 pi r dr on the nodes rs_eval."""
    w = _trapezoid_weights(rs) * rho * 2.0 * math.pi * rs
    K = _kbar(rs_eval[:, None], rs[None, :], interaction, ell)
    return K @ w


def _trapezoid_weights(x):
    w = np.zeros_like(x)
    dx = np.diff(x)
    w[:-1] += dx / 2
    w[1:] += dx / 2
    return w


def _radial_double_energy(rs, rho, interaction, ell):
    U = _radial_potential_field(rs, rs, rho, interaction, ell)
    w = _trapezoid_weights(rs) * rho * 2.0 * math.pi * rs
    return float(U @ w)


def solve_equilibrium_radial(V: ExternalPotential, interaction: str = "coulomb",
                             ell: Optional[float] = None, n_grid: int = 2001,
                             r_max: Optional[float] = None) -> EquilibriumMeasure:
    """Radial fast path.

    Coulomb: candidate density Laplacian(V)/(4 pi) on a disk whose radius
    is fixed by mass normalization (bisection), then the Robin constant
    from U + V/2 on the support and an exterior Euler-Lagrange inequality
    check.  Screened kernel: the density formula couples to the unknown
    Robin constant; mass normalization makes c linear in the support
    radius and the remaining scalar equation (zero Euler-Lagrange residual
    at the origin) is solved by bisection.
    """
    if not V.is_radial:
        raise EquilibriumError("radial solver needs a radial potential")
    if interaction == "coulomb":
        return _solve_radial_coulomb(V, n_grid, r_max)
    if interaction == "yukawa":
        if ell is None or not ell > 0:
            raise ValueError("yukawa interaction needs ell")
        return _solve_radial_yukawa(V, ell, n_grid, r_max)
    raise ValueError(f"unsupported interaction {interaction!r}")


def _mass_inside(V, R, n=4001):
    if isinstance(V, RadialPolynomialPotential):
        return V.coulomb_mass_inside(R)
    r = np.linspace(0.0, R, n)
    integrand = V.radial_laplacian(r) / (4.0 * math.pi) * 2.0 * math.pi * r
    return float(np.trapezoid(integrand, r))


def _solve_radial_coulomb(V, n_grid, r_max):
    r_hi = r_max or 1.0
    for _ in range(200):
        if _mass_inside(V, r_hi) >= 1.0:
            break
        r_hi *= 1.5
    else:
        raise EquilibriumError(f"mass bracket failed: mass({r_hi}) = {_mass_inside(V, r_hi)} < 1")
    R = brentq(lambda rr: _mass_inside(V, rr) - 1.0, 1e-9, r_hi, xtol=1e-14)

    rs = np.linspace(0.0, R, n_grid)
    rho = V.radial_laplacian(rs) / (4.0 * math.pi)
    if np.any(rho < -1e-12):
        raise EquilibriumError("negative candidate density: annular support, not implemented")
    rho = np.maximum(rho, 0.0)

    U = _radial_potential_field(rs, rs, rho, "coulomb", None)
    el = U + V.radial_value(rs) / 2.0
    c_V = float(np.mean(el))
    el_residual = float(np.max(np.abs(el - c_V)))

    # exterior inequality U + V/2 >= c (flags annulus/support mistakes)
    r_out = np.linspace(R * 1.001, R * 3.0, 64)
    el_out = _radial_potential_field(r_out, rs, rho, "coulomb", None) + V.radial_value(r_out) / 2.0
    if np.any(el_out < c_V - 1e-4):
        raise EquilibriumError("exterior Euler-Lagrange inequality violated")

    I_V = _radial_double_energy(rs, rho, "coulomb", None) + _radial_integral(rs, rho, V.radial_value(rs))
    entropy = entropy_from_radial(rs, rho)
    return EquilibriumMeasure(
        kind="radial", interaction="coulomb", ell=None,
        support={"kind": "disk", "radius": float(R)},
        c_V=c_V, I_V=I_V, entropy=entropy, el_residual=el_residual,
        rs=rs, rho=rho)


def _radial_integral(rs, rho, values):
    return float(np.sum(_trapezoid_weights(rs) * rho * 2.0 * math.pi * rs * values))


def entropy_from_radial(rs, rho, floor=1e-12):
    vals = np.where(rho > floor, rho * np.log(np.maximum(rho, floor)), 0.0)
    return float(np.sum(_trapezoid_weights(rs) * 2.0 * math.pi * rs * vals))


def _solve_radial_yukawa(V, ell, n_grid, r_max):
    m2 = 1.0 / ell**2

    def density_and_c(R):
        rs = np.linspace(0.0, R, n_grid)
        q = V.radial_value(rs)
        lap = V.radial_laplacian(rs)
        w = _trapezoid_weights(rs) * 2.0 * math.pi * rs
        base = (lap - m2 * q) / (4.0 * math.pi)
        mass_base = float(np.sum(w * base))
        mass_per_c = 2.0 * m2 / (4.0 * math.pi) * math.pi * R**2
        c = (1.0 - mass_base) / mass_per_c
        rho = base + 2.0 * m2 * c / (4.0 * math.pi)
        return rs, rho, c

    def el_origin_residual(R):
        rs, rho, c = density_and_c(R)
        U0 = _radial_potential_field(np.array([0.0]), rs, rho, "yukawa", ell)[0]
        return U0 + V.radial_value(np.array([0.0]))[0] / 2.0 - c

    r_lo, r_hi = 0.05, (r_max or 1.0)
    f_lo = el_origin_residual(r_lo)
    f_hi = el_origin_residual(r_hi)
    grow = 0
    while f_lo * f_hi > 0 and grow < 60:
        r_hi *= 1.3
        f_hi = el_origin_residual(r_hi)
        grow += 1
    if f_lo * f_hi > 0:
        raise EquilibriumError(
            f"support bracket failed: residual({r_lo})={f_lo:.3e}, residual({r_hi})={f_hi:.3e}")
    R = brentq(el_origin_residual, r_lo, r_hi, xtol=1e-12)

    rs, rho, c_V = density_and_c(R)
    if np.any(rho < -1e-10):
        raise EquilibriumError("negative screened equilibrium density")
    rho = np.maximum(rho, 0.0)
    U = _radial_potential_field(rs, rs, rho, "yukawa", ell)
    el = U + V.radial_value(rs) / 2.0
    el_residual = float(np.max(np.abs(el - c_V)))
    I_V = _radial_double_energy(rs, rho, "yukawa", ell) + _radial_integral(rs, rho, V.radial_value(rs))
    entropy = entropy_from_radial(rs, rho)
    return EquilibriumMeasure(
        kind="radial", interaction="yukawa", ell=float(ell),
        support={"kind": "disk", "radius": float(R)},
        c_V=float(c_V), I_V=I_V, entropy=entropy, el_residual=el_residual,
        rs=rs, rho=rho)


# ---------------------------------------------------------------------------
# grid solver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Square point grid covering [-extent, extent]^2 with n points per
    side (cell width 2*extent/(n-1))."""

    extent: float
    n: int

    def axes(self):
        xs = np.linspace(-self.extent, self.extent, self.n)
        return xs, xs

    @property
    def h(self) -> float:
        return 2.0 * self.extent / (self.n - 1)


_LOG_CELL_CONSTANT = None


def log_cell_average_constant() -> float:
    """-E[log|u - v|] for u, v independent uniform on a unit square.

    Computed once by per-angle closed-form radial integrals (the log
    factor integrates exactly against the polynomial difference density).
    """
    global _LOG_CELL_CONSTANT
    if _LOG_CELL_CONSTANT is not None:
        return _LOG_CELL_CONSTANT
    tq, wq = np.polynomial.legendre.leggauss(240)
    phis = 0.25 * math.pi * (tq + 1.0)
    wphi = wq * 0.25 * math.pi
    total = 0.0
    for phi, wp in zip(phis, wphi):
        c, s = math.cos(phi), math.sin(phi)
        rm = min(1.0 / max(c, 1e-15), 1.0 / max(s, 1e-15))
        # r (1 - r c)(1 - r s) = r - (c+s) r^2 + c s r^3
        coef = {1: 1.0, 2: -(c + s), 3: c * s}
        val = 0.0
        for k, a in coef.items():
            val += -a * rm ** (k + 1) * (math.log(rm) / (k + 1) - 1.0 / (k + 1) ** 2)
        total += val * wp
    # 4 quadrants, integrand symmetric in phi <-> pi/2 - phi already covered
    _LOG_CELL_CONSTANT = 4.0 * total / 2.0
    return _LOG_CELL_CONSTANT


def _grid_kernel(grid: GridSpec, interaction: str, ell: Optional[float]):
    xs, _ = grid.axes()
    h = grid.h
    d = np.arange(-(grid.n - 1), grid.n) * h
    DX, DY = np.meshgrid(d, d, indexing="ij")
    R = np.hypot(DX, DY)
    K = np.zeros_like(R)
    mask = R > 0
    if interaction == "coulomb":
        K[mask] = -np.log(R[mask])
        K[~mask] = log_cell_average_constant() - math.log(h)
    elif interaction == "yukawa":
        K[mask] = sp.k0(R[mask] / ell)
        # cell average of K0 = cell average of -log r plus the smooth rest
        K[~mask] = (log_cell_average_constant() - math.log(h)
                    + math.log(ell) + (math.log(2.0) - 0.5772156649015329)
                    + _k0_smooth_cell_correction(h, ell))
    else:
        raise ValueError(f"grid solver does not handle {interaction!r}")
    return K


def _k0_smooth_cell_correction(h, ell):
    """Cell average of K0(r/ell) + log(r/ell) - Y0 over the difference
    density of one cell; O((h/ell)^2 log), by polar quadrature."""
    tq, wq = np.polynomial.legendre.leggauss(32)
    phis = 0.25 * math.pi * (tq + 1.0)
    wphi = wq * 0.25 * math.pi
    total = 0.0
    y0 = math.log(2.0) - 0.5772156649015329
    for phi, wp in zip(phis, wphi):
        c, s = math.cos(phi), math.sin(phi)
        rm = min(1.0 / max(c, 1e-15), 1.0 / max(s, 1e-15))
        r = 0.5 * rm * (tq + 1.0)
        wr = 0.5 * rm * wq
        x = np.maximum(r * h / ell, 1e-300)
        smooth = sp.k0(x) + np.log(x) - y0
        dens = r * (1.0 - r * c) * (1.0 - r * s)
        total += wp * float(np.sum(wr * smooth * dens))
    return 4.0 * total / 2.0


def _project_simplex(v):
    u = np.sort(v.ravel())[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, u.size + 1)
    cond = u - (css - 1.0) / idx > 0
    rho = idx[cond][-1]
    theta = (css[cond][-1] - 1.0) / rho
    return np.maximum(v - theta, 0.0)


def solve_equilibrium_grid(V: ExternalPotential, interaction: str = "coulomb",
                           grid: GridSpec = GridSpec(1.5, 201),
                           ell: Optional[float] = None, iterations: int = 800,
                           tol: Optional[float] = None) -> EquilibriumMeasure:
    """Discretized convex program over the probability simplex.

    Cell masses carry the measure; the quadratic form is applied by FFT
    convolution with the kernel sampled on the difference grid (diagonal =
    cell-averaged kernel).  Accelerated projected gradient with energy
    restarts; returns the best iterate with its KKT residual if the
    tolerance is not met.
    """
    xs, ys = grid.axes()
    h = grid.h
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    Vg = V.value(pts).reshape(grid.n, grid.n)
    Vg = np.where(np.isfinite(Vg), Vg, 1e30)
    K = _grid_kernel(grid, interaction, ell)

    def apply_K(p):
        return fftconvolve(p, K, mode="same")

    # Lipschitz estimate via power iteration
    q = np.full((grid.n, grid.n), 1.0)
    q[::2, ::2] = -1.0
    lam = 1.0
    for _ in range(12):
        q2 = apply_K(q)
        lam = float(np.abs(np.sum(q * q2)))
        q = q2 / np.linalg.norm(q2)
    step = 1.0 / (2.0 * max(lam, 1e-12))

    p = np.full((grid.n, grid.n), 1.0 / grid.n**2)
    yk = p.copy()
    tk = 1.0
    prev_E = np.inf
    for it in range(iterations):
        g = Vg + 2.0 * apply_K(yk)
        p_next = _project_simplex(yk - step * g).reshape(grid.n, grid.n)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
        yk = p_next + ((tk - 1.0) / t_next) * (p_next - p)
        p, tk = p_next, t_next
        if (it + 1) % 100 == 0:
            E = float(np.sum(Vg * p) + np.sum(p * apply_K(p)))
            if E > prev_E:        # restart momentum
                yk = p.copy()
                tk = 1.0
            prev_E = E

    U = apply_K(p)
    g_half = U + Vg / 2.0
    supp = p > max(p.max() * 1e-3, 0.0)
    c_V = float(np.median(g_half[supp]))
    el_in = float(np.max(np.abs(g_half[supp] - c_V)))
    el_out = float(max(0.0, np.max(c_V - g_half[~supp]))) if np.any(~supp) else 0.0
    residual = max(el_in, el_out)
    target = tol if tol is not None else 1e-3 * h
    converged = residual <= max(target, 1e-6)

    I_V = float(np.sum(Vg * p) + np.sum(p * apply_K(p)))
    rho = p / h**2
    entropy = float(np.sum(p[p > 1e-15] * np.log(rho[p > 1e-15])))
    return EquilibriumMeasure(
        kind="grid", interaction=interaction, ell=ell,
        support={"kind": "grid-mask", "extent": grid.extent, "n": grid.n,
                 "threshold": float(p.max() * 1e-3)},
        c_V=c_V, I_V=I_V, entropy=entropy, el_residual=residual,
        grid_x=xs, grid_y=ys, masses=p, converged=converged)


# ---------------------------------------------------------------------------
# energy and entropy of arbitrary measures
# ---------------------------------------------------------------------------

def energy_functional(mu: EquilibriumMeasure, V: Optional[ExternalPotential],
                      interaction: Optional[str] = None, ell: Optional[float] = None,
                      torus_side: float = 1.0) -> float:
    """I(mu) = iint K dmu dmu + int V dmu for the given measure."""
    interaction = interaction or mu.interaction
    ell = ell if ell is not None else mu.ell
    if mu.kind == "uniform-torus" or interaction == "torus_yukawa":
        side = mu.torus_side if mu.kind == "uniform-torus" else torus_side
        return uniform_torus_energy(ell, side)
    if mu.kind == "radial":
        pair = _radial_double_energy(mu.rs, mu.rho, interaction, ell)
        ext = _radial_integral(mu.rs, mu.rho, V.radial_value(mu.rs)) if V is not None else 0.0
        return pair + ext
    grid = GridSpec(float(mu.grid_x[-1]), len(mu.grid_x))
    K = _grid_kernel(grid, interaction, ell)
    pair = float(np.sum(mu.masses * fftconvolve(mu.masses, K, mode="same")))
    ext = 0.0
    if V is not None:
        X, Y = np.meshgrid(mu.grid_x, mu.grid_y, indexing="ij")
        ext = float(np.sum(V.value(np.column_stack([X.ravel(), Y.ravel()])).reshape(mu.masses.shape)
                           * mu.masses))
    return pair + ext


def uniform_torus_energy(ell: float, side: float = 1.0, n_phi: int = 128,
                         n_r: int = 96) -> float:
    """iint U dmu dmu for the uniform probability measure on the torus:
    equals the cell integral of the periodized kernel divided by side^2.

    The principal K0 image is integrated in closed form per angle
    (int_0^a K0(r/ell) r dr = ell^2 (1 - (a/ell) K1(a/ell))), the smooth
    image sum by Gauss-Legendre.
    """
    from .kernels import torus_truncation_shells
    b = side
    tq, wq = np.polynomial.legendre.leggauss(n_phi)
    # one octant phi in [0, pi/4]: r_max = (b/2)/cos(phi) is analytic there
    phis = 0.125 * math.pi * (tq + 1.0)
    wphi = wq * 0.125 * math.pi
    total = 0.0
    for phi, wp in zip(phis, wphi):
        rm = (b / 2.0) / math.cos(phi)
        a = min(rm / ell, 600.0)           # k1 underflows past ~600
        total += wp * ell**2 * (1.0 - a * sp.k1(a))
    principal = 8.0 * total
    # image sum over the cell, smooth: tensor Gauss-Legendre
    shells = torus_truncation_shells(ell, b)
    tq, wq = np.polynomial.legendre.leggauss(n_r)
    xs = (b / 2.0) * tq
    ws = (b / 2.0) * wq
    Xg, Yg = np.meshgrid(xs, xs, indexing="ij")
    S = np.zeros_like(Xg)
    for nx in range(-shells, shells + 1):
        for ny in range(-shells, shells + 1):
            if nx == 0 and ny == 0:
                continue
            S += sp.k0(np.hypot(Xg + nx * b, Yg + ny * b) / ell)
    image = float(np.einsum("i,j,ij->", ws, ws, S))
    return (principal + image) / b**2


def entropy_integral(mu: EquilibriumMeasure) -> float:
    """int rho log rho over the support (cells with rho < 1e-12 dropped)."""
    if mu.kind == "uniform-torus":
        return math.log(1.0 / mu.torus_side**2)
    if mu.kind == "radial":
        return entropy_from_radial(mu.rs, mu.rho)
    h = mu.grid_x[1] - mu.grid_x[0]
    rho = mu.masses / h**2
    keep = rho > 1e-12
    return float(np.sum(mu.masses[keep] * np.log(rho[keep])))


# ---------------------------------------------------------------------------
# effective potential of the short-range approximation
# ---------------------------------------------------------------------------

@dataclass
class EffectivePotential:
    """Q = V + 2 (L * mu) with L the long-range remainder between ranges
    ell and R, plus the constant K = iint L dmu dmu.

    The equilibrium measure of (Q, range ell) coincides with that of
    (V, range R), and the minimized energies differ by exactly K.
    """

    base: ExternalPotential
    ell: float
    R: float
    K_const: float
    rs: np.ndarray
    Q_vals: np.ndarray
    lap_vals: np.ndarray

    def as_potential(self) -> RadialTabulatedPotential:
        return RadialTabulatedPotential(self.rs, self.Q_vals, self.lap_vals, tail=self.base)

    def value_radial(self, r):
        return PchipInterpolator(self.rs, self.Q_vals)(np.asarray(r, dtype=float))


def effective_potential(V: ExternalPotential, mu: EquilibriumMeasure,
                        ell: float, R: float, r_extent: float = None) -> EffectivePotential:
    """Build Q(z) = V(z) + 2 int L(z - w) mu(dw) and K = iint L dmu dmu
    for the remainder L between ranges ell and R (radial measures)."""
    if mu.kind != "radial":
        raise ValueError("effective potential implemented for radial measures")
    if not (0 < ell <= R):
        raise ValueError("need 0 < ell <= R")
    rs_mu, rho = mu.rs, mu.rho
    r_extent = r_extent or 3.0 * rs_mu[-1]
    rs = np.linspace(0.0, r_extent, 1201)
    w = _trapezoid_weights(rs_mu) * rho * 2.0 * math.pi * rs_mu

    def lbar(s_nodes):
        KR = _kbar_yukawa(s_nodes[:, None], rs_mu[None, :], R)
        Kl = _kbar_yukawa(s_nodes[:, None], rs_mu[None, :], ell)
        return KR - Kl

    conv = lbar(rs) @ w
    Q_vals = V.radial_value(rs) + 2.0 * conv
    # Laplacian of the smooth convolution: (m_R^2 Y_R - m_l^2 Y_l) * 2 mu
    m2R, m2l = 1.0 / R**2, 1.0 / ell**2
    lap_kernel = (m2R * _kbar_yukawa(rs[:, None], rs_mu[None, :], R)
                  - m2l * _kbar_yukawa(rs[:, None], rs_mu[None, :], ell))
    lap_vals = V.radial_laplacian(rs) + 2.0 * (lap_kernel @ w)
    K_const = float((lbar(rs_mu) @ w) @ (_trapezoid_weights(rs_mu) * rho * 2.0 * math.pi * rs_mu))
    return EffectivePotential(base=V, ell=float(ell), R=float(R), K_const=K_const,
                              rs=rs, Q_vals=Q_vals, lap_vals=lap_vals)


def conditional_potential(V: ExternalPotential, exterior: PointConfig | np.ndarray,
                          center, radius: float, n_total: int) -> ConditionalPotential:
    """Conditional potential of the gas in a disk given exterior particles."""
    pts = exterior.points if isinstance(exterior, PointConfig) else np.asarray(exterior, dtype=float)
    return ConditionalPotential(V, pts, center, radius, n_total)
