"""Independent oracles for the test suite.

Everything here is deliberately implemented without touching the
production evaluators: defining integrals by adaptive quadrature, brute
force sums, closed-form finite-N determinantal formulas, and synthetic
processes with known statistics.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.integrate import quad
from scipy.special import gammaln


def yukawa_defining_integral(r: float, ell: float) -> float:
    """g(a) = int_1^inf exp(-a (s + 1/s)) ds / s at a = r / (2 ell)."""
    a = r / (2.0 * ell)
    val, _ = quad(lambda s: math.exp(-a * (s + 1.0 / s)) / s, 1.0, np.inf,
                  limit=400)
    return val


def gamma_constant_integral() -> float:
    """int_0^inf (exp(-s) - 1_{s<1}) ds / s (equals minus Euler's gamma)."""
    lo, _ = quad(lambda s: (math.exp(-s) - 1.0) / s, 0.0, 1.0, limit=200)
    hi, _ = quad(lambda s: math.exp(-s) / s, 1.0, np.inf, limit=200)
    return lo + hi


def yukawa_mass_quadrature(ell: float) -> float:
    """Plane integral of the screened kernel by radial quadrature."""
    val, _ = quad(lambda r: yukawa_defining_integral(r, ell) * 2 * math.pi * r,
                  1e-14, 80 * ell, limit=400)
    return val


def smeared_disk_average(x: float, y: float, r_smear: float, ell: float,
                         n_r: int = 200, n_t: int = 256) -> float:
    """Average of K0(|z - w|/ell) over w in the disk B(0, r_smear), by
    polar quadrature around z (kernel log singularity integrable)."""
    import scipy.special as sp
    z = complex(x, y)
    tq, wq = np.polynomial.legendre.leggauss(n_r)
    th = 2 * math.pi * (np.arange(n_t) + 0.5) / n_t
    eit = np.exp(1j * th)
    # distance from z to the disk boundary along each inward ray
    proj = np.real(z * np.conj(eit))
    disc = r_smear**2 - abs(z) ** 2 + proj**2
    inside = abs(z) <= r_smear
    total = 0.0
    for k in range(n_t):
        if disc[k] <= 0 and not inside:
            continue
        if inside:
            r_lo, r_hi = 0.0, proj[k] + math.sqrt(max(disc[k], 0.0))
        else:
            if proj[k] <= 0:
                continue
            root = math.sqrt(disc[k])
            r_lo, r_hi = proj[k] - root, proj[k] + root
        r = 0.5 * (r_hi - r_lo) * (tq + 1.0) + r_lo
        w = 0.5 * (r_hi - r_lo) * wq
        total += float(np.sum(w * sp.k0(np.maximum(r, 1e-300) / ell) * r)) \
            * (2 * math.pi / n_t)
    return total / (math.pi * r_smear**2)


# ---------------------------------------------------------------------------
# finite-N determinantal ensemble at quadratic potential, beta = 1
# ---------------------------------------------------------------------------

def ginibre_intensity(r: np.ndarray, n: int) -> np.ndarray:
    """One-point function K(z, z) of the N-particle determinantal gas with
    weight exp(-N |z|^2): (N/pi) exp(-N r^2) sum_{k<N} (N r^2)^k / k!."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    x = n * r**2
    for k in range(n):
        out += np.exp(k * np.log(np.maximum(x, 1e-300)) - gammaln(k + 1) - x)
    return n / math.pi * out


def _angular_k2(r1: np.ndarray, r2: np.ndarray, n: int) -> np.ndarray:
    """int |K(z, w)|^2 dtheta over the angle between z and w, with
    |z| = r1, |w| = r2: 2 pi (N/pi)^2 exp(-N(r1^2+r2^2))
    sum_k (N^2 r1^2 r2^2)^k / (k!)^2."""
    s = np.zeros(np.broadcast_shapes(np.shape(r1), np.shape(r2)))
    lx = np.log(np.maximum(n * n * np.asarray(r1) ** 2 * np.asarray(r2) ** 2,
                           1e-300))
    base = -n * (np.asarray(r1) ** 2 + np.asarray(r2) ** 2)
    for k in range(n):
        s += np.exp(k * lx - 2.0 * gammaln(k + 1) + base)
    return 2.0 * math.pi * (n / math.pi) ** 2 * s


def ginibre_xf_moments(f_radial, n: int, r_max: float = 3.0,
                       n_quad: int = 400) -> tuple:
    """(mean, variance) of sum_j f(|z_j|) under the finite-N determinantal
    gas, by quadrature against the exact kernel:

        E = int f K(z,z) dm,
        Var = int f^2 K(z,z) dm - iint f(z) f(w) |K(z,w)|^2 dm dm.
    """
    tq, wq = np.polynomial.legendre.leggauss(n_quad)
    r = 0.5 * r_max * (tq + 1.0)
    w = 0.5 * r_max * wq * 2.0 * math.pi * r
    fr = f_radial(r)
    dens = ginibre_intensity(r, n)
    mean = float(np.sum(w * fr * dens))
    second = float(np.sum(w * fr**2 * dens))
    k2 = _angular_k2(r[:, None], r[None, :], n)
    wr = 0.5 * r_max * wq * r
    cross = float((wr * fr) @ k2 @ (wr * fr))
    return mean, second - cross


# ---------------------------------------------------------------------------
# synthetic series
# ---------------------------------------------------------------------------

def ar1_series(rng: np.random.Generator, phi: float, n: int) -> np.ndarray:
    x = np.empty(n)
    x[0] = rng.standard_normal() / math.sqrt(1 - phi**2)
    eps = rng.standard_normal(n)
    for i in range(1, n):
        x[i] = phi * x[i - 1] + eps[i]
    return x


# ---------------------------------------------------------------------------
# two-particle torus gas
# ---------------------------------------------------------------------------

def torus_pair_distance_density(ell: float, beta: float, side: float = 1.0,
                                n_grid: int = 400):
    """Probability density of the pair distance |z1 - z2| for the
    two-particle periodized gas, by direct quadrature of
    exp(-2 beta U(d)) over the displacement cell.  Returns (edges,
    probabilities) on equal-width distance bins."""
    from plasmalab.kernels import torus_yukawa

    xs = -side / 2 + side * (np.arange(n_grid) + 0.5) / n_grid
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    U = torus_yukawa(pts, ell, side).reshape(n_grid, n_grid)
    weight = np.exp(-2.0 * beta * U)
    weight /= weight.sum()
    dist = np.hypot(X, Y).ravel()
    edges = np.linspace(0.0, side / math.sqrt(2.0), 24)
    probs = np.zeros(len(edges) - 1)
    idx = np.digitize(dist, edges) - 1
    wflat = weight.ravel()
    for i in range(len(probs)):
        probs[i] = wflat[idx == i].sum()
    return edges, probs
