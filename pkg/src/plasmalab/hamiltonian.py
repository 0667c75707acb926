"""Total and incremental energy of the gas for every interaction variant.

The Hamiltonian is N sum_j V(z_j) + sum_{j != k} G(z_j - z_k) with the
double sum over ordered pairs (each unordered pair counted twice).
Compiled kernels cover the Coulomb, screened, and periodized-screened
interactions (exact lattice sum or tabulated image sum); the
angle-perturbed interaction G_t = C - (t/2) Re Psi_minus runs through a
vectorized numpy path.  A cell list accelerates incremental updates for
short-range kernels on the torus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba as nb
import numpy as np

from .equilibrium import (ConditionalPotential, ExternalPotential,
                          RadialPolynomialPotential)
from .geometry import Domain, PointConfig, wrap
from .kernels import (TorusYukawaTable, k0_fast, lattice_offsets,
                      torus_truncation_shells, torus_yukawa_table)

__all__ = [
    "InteractionSpec",
    "EnergyModel",
    "CellList",
    "CoincidentPointsError",
    "total_energy",
    "delta_energy",
    "angle_pair_kernel",
    "hamiltonian_split_check",
]

# interaction codes for compiled kernels
_COULOMB, _YUKAWA, _TORUS_EXACT, _TORUS_TABLE = 0, 1, 2, 3
# potential codes
_POT_NONE, _POT_RADIAL_POLY, _POT_CONDITIONAL = 0, 1, 2

_EMPTY = np.zeros((0, 2))
_EMPTY_TABLE = np.zeros((4, 4))
_EMPTY_COEF = np.zeros(1)


class CoincidentPointsError(ValueError):
    """Energy requested at a configuration with two coincident points."""


@dataclass(frozen=True)
class InteractionSpec:
    """Which pair kernel is active.

    kind: "coulomb" | "yukawa" | "torus_yukawa" | "coulomb_angle".
    ``tabulated`` switches the periodized kernel to the bicubic image-sum
    table (sampler hot path, ~1e-9 absolute kernel error); the exact
    lattice sum is the default.
    """

    kind: str
    ell: Optional[float] = None
    torus_side: float = 1.0
    truncation: Optional[int] = None
    tabulated: bool = False
    t: float = 0.0
    theta: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("coulomb", "yukawa", "torus_yukawa", "coulomb_angle"):
            raise ValueError(f"unknown interaction {self.kind!r}")
        if self.kind in ("yukawa", "torus_yukawa") and not (self.ell and self.ell > 0):
            raise ValueError("screened interactions need ell > 0")
        if self.kind == "coulomb_angle" and not (self.theta and self.theta > 0):
            raise ValueError("angle interaction needs theta > 0")

    def shells(self) -> int:
        if self.truncation is not None:
            return int(self.truncation)
        return torus_truncation_shells(self.ell, self.torus_side)


@dataclass
class AngleBlock:
    """Data of the angle-perturbed interaction: amplitude t, Gaussian
    scale theta, the map h (and its holomorphic derivative for the
    removable diagonal), the smooth one-body field F = Re (Psi_minus * mu),
    and the constant -(t/2) N^2 Re iint Psi_minus dmu dmu."""

    t: float
    theta: float
    h: Callable[[np.ndarray], np.ndarray]          # complex h(z), z complex array
    dh: Callable[[np.ndarray], np.ndarray]         # d h / d z
    F: Callable[[np.ndarray], np.ndarray]          # real field on (N, 2) points
    const: float = 0.0
    grad_h_inf: float = 0.0


@dataclass
class EnergyModel:
    """Interaction + external potential + inverse temperature for N
    particles.  The external potential enters as N sum_j V(z_j)."""

    interaction: InteractionSpec
    potential: Optional[ExternalPotential]
    beta: float
    n: int
    angle: Optional[AngleBlock] = None

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be nonnegative")
        if self.angle is not None:
            if abs(self.angle.t) * self.n * self.angle.theta**2 > 1.0 + 1e-12:
                raise ValueError("angle amplitude out of range: need |t| N theta^2 <= 1")
            if self.angle.grad_h_inf > 1.0 + 1e-9:
                raise ValueError("angle map must have |grad h| <= 1")
        self._prepared = None

    @property
    def domain(self) -> Domain:
        if self.interaction.kind == "torus_yukawa":
            return Domain("torus", self.interaction.torus_side)
        return Domain("plane")

    # -- compiled-path argument bundle ------------------------------------

    def prepared(self):
        if self._prepared is None:
            self._prepared = _prepare(self)
        return self._prepared

    def descriptor(self) -> dict:
        d = {
            "interaction": {
                "kind": self.interaction.kind,
                "ell": self.interaction.ell,
                "torus_side": self.interaction.torus_side,
                "tabulated": self.interaction.tabulated,
                "t": self.interaction.t,
                "theta": self.interaction.theta,
            },
            "beta": self.beta,
            "n": self.n,
            "potential": self.potential.descriptor() if self.potential else None,
        }
        return d


@dataclass
class _Prepared:
    kind: int
    ell: float
    side: float
    offsets: np.ndarray
    table: np.ndarray
    table_h: float
    pot_kind: int
    coeffs: np.ndarray
    exterior: np.ndarray
    cond: np.ndarray          # [scale, cx, cy, radius, n_total]
    is_torus: bool
    supported: bool


def _prepare(model: EnergyModel) -> _Prepared:
    spec = model.interaction
    kind, ell, side = _COULOMB, 1.0, spec.torus_side
    offsets, table, table_h = _EMPTY, _EMPTY_TABLE, 1.0
    supported = True
    if spec.kind == "coulomb":
        kind = _COULOMB
    elif spec.kind == "yukawa":
        kind, ell = _YUKAWA, spec.ell
    elif spec.kind == "torus_yukawa":
        ell = spec.ell
        if spec.tabulated:
            kind = _TORUS_TABLE
            tab = _table_cache(spec.ell, spec.torus_side)
            table, table_h = tab.table, tab.h
        else:
            kind = _TORUS_EXACT
            offsets = lattice_offsets(spec.torus_side, spec.shells())
    else:
        supported = False

    pot_kind, coeffs, exterior = _POT_NONE, _EMPTY_COEF, _EMPTY
    cond = np.zeros(5)
    pot = model.potential
    if pot is None:
        pass
    elif isinstance(pot, RadialPolynomialPotential):
        pot_kind, coeffs = _POT_RADIAL_POLY, np.asarray(pot.coeffs, dtype=float)
    elif isinstance(pot, ConditionalPotential) and isinstance(pot.base, RadialPolynomialPotential):
        pot_kind = _POT_CONDITIONAL
        coeffs = np.asarray(pot.base.coeffs, dtype=float)
        exterior = pot.exterior
        cond = np.array([pot.n_total / pot.m_interior, pot.center[0], pot.center[1],
                         pot.radius, float(pot.n_total)])
    else:
        supported = False
    return _Prepared(kind=kind, ell=ell, side=side, offsets=offsets, table=table,
                     table_h=table_h, pot_kind=pot_kind, coeffs=coeffs,
                     exterior=exterior, cond=cond,
                     is_torus=spec.kind == "torus_yukawa", supported=supported)


_TABLE_CACHE: dict = {}


def _table_cache(ell: float, side: float) -> TorusYukawaTable:
    key = (round(ell, 12), round(side, 12))
    if key not in _TABLE_CACHE:
        _TABLE_CACHE[key] = TorusYukawaTable(ell, side)
    return _TABLE_CACHE[key]


# ---------------------------------------------------------------------------
# compiled kernels
# ---------------------------------------------------------------------------

@nb.njit(cache=True, inline="always")
def _pair(kind, ell, side, offsets, table, table_h, dx, dy):
    if kind == 0:      # coulomb
        return -0.5 * math.log(dx * dx + dy * dy)
    if kind == 1:      # yukawa plane
        return k0_fast(math.sqrt(dx * dx + dy * dy) / ell)
    # torus kinds need the minimal image
    dx -= side * math.floor(dx / side + 0.5)
    dy -= side * math.floor(dy / side + 0.5)
    if kind == 3:
        return torus_yukawa_table(table, table_h, ell, dx, dy)
    tot = 0.0
    for i in range(offsets.shape[0]):
        ox = dx + offsets[i, 0]
        oy = dy + offsets[i, 1]
        tot += k0_fast(math.sqrt(ox * ox + oy * oy) / ell)
    return tot


@nb.njit(cache=True, inline="always")
def _potential(pot_kind, coeffs, exterior, cond, x, y):
    if pot_kind == 0:
        return 0.0
    if pot_kind == 1:
        r2 = x * x + y * y
        v = 0.0
        for k in range(coeffs.size - 1, -1, -1):
            v = v * r2 + coeffs[k]
        return v
    # conditional: scale * (V - (2/n_total) sum log|w - ext|), +inf outside disk
    cx, cy, rad = cond[1], cond[2], cond[3]
    ddx = x - cx
    ddy = y - cy
    if ddx * ddx + ddy * ddy > rad * rad:
        return np.inf
    r2 = x * x + y * y
    v = 0.0
    for k in range(coeffs.size - 1, -1, -1):
        v = v * r2 + coeffs[k]
    logsum = 0.0
    for i in range(exterior.shape[0]):
        ex = x - exterior[i, 0]
        ey = y - exterior[i, 1]
        logsum += 0.5 * math.log(ex * ex + ey * ey)
    return cond[0] * (v - 2.0 * logsum / cond[4])


@nb.njit(cache=True)
def _total_energy(pos, kind, ell, side, offsets, table, table_h,
                  pot_kind, coeffs, exterior, cond, n_scale):
    n = pos.shape[0]
    pair = 0.0
    for j in range(n):
        for k in range(j + 1, n):
            pair += _pair(kind, ell, side, offsets, table, table_h,
                          pos[j, 0] - pos[k, 0], pos[j, 1] - pos[k, 1])
    ext = 0.0
    for j in range(n):
        ext += _potential(pot_kind, coeffs, exterior, cond, pos[j, 0], pos[j, 1])
    return 2.0 * pair + n_scale * ext


@nb.njit(cache=True)
def _delta_energy(pos, j, nx_, ny_, kind, ell, side, offsets, table, table_h,
                  pot_kind, coeffs, exterior, cond, n_scale):
    n = pos.shape[0]
    ox, oy = pos[j, 0], pos[j, 1]
    dpair = 0.0
    for k in range(n):
        if k == j:
            continue
        dpair += _pair(kind, ell, side, offsets, table, table_h,
                       nx_ - pos[k, 0], ny_ - pos[k, 1])
        dpair -= _pair(kind, ell, side, offsets, table, table_h,
                       ox - pos[k, 0], oy - pos[k, 1])
    dext = (_potential(pot_kind, coeffs, exterior, cond, nx_, ny_)
            - _potential(pot_kind, coeffs, exterior, cond, ox, oy))
    return 2.0 * dpair + n_scale * dext


@nb.njit(cache=True)
def _metropolis_sweep(pos, kind, ell, side, offsets, table, table_h,
                      pot_kind, coeffs, exterior, cond, n_scale,
                      beta, sigma, is_torus, normals, uniforms):
    n = pos.shape[0]
    accepted = 0
    de_total = 0.0
    for j in range(n):
        nx_ = pos[j, 0] + sigma * normals[j, 0]
        ny_ = pos[j, 1] + sigma * normals[j, 1]
        if is_torus:
            nx_ -= side * math.floor(nx_ / side + 0.5)
            ny_ -= side * math.floor(ny_ / side + 0.5)
        coincident = False
        for k in range(n):
            if k != j and pos[k, 0] == nx_ and pos[k, 1] == ny_:
                coincident = True
                break
        if coincident:
            continue
        de = _delta_energy(pos, j, nx_, ny_, kind, ell, side, offsets, table,
                           table_h, pot_kind, coeffs, exterior, cond, n_scale)
        if not np.isfinite(de):
            if de < 0:      # leaving an infinite-energy state is always accepted
                pass
            else:
                continue
        if de <= 0.0 or uniforms[j] < math.exp(-beta * de):
            pos[j, 0] = nx_
            pos[j, 1] = ny_
            accepted += 1
            de_total += de
    return accepted, de_total


# ---------------------------------------------------------------------------
# cell list (short-range kernels on the torus)
# ---------------------------------------------------------------------------

@dataclass
class CellList:
    """Uniform cell grid on the torus with cell side >= the interaction
    cutoff, so each particle interacts only with its 3x3 neighborhood."""

    side: float
    cutoff: float
    n_cells: int = field(init=False)
    cell_side: float = field(init=False)

    def __post_init__(self):
        self.n_cells = max(int(math.floor(self.side / self.cutoff)), 1)
        self.cell_side = self.side / self.n_cells

    @property
    def worthwhile(self) -> bool:
        return self.n_cells >= 3

    def build(self, pos: np.ndarray):
        n = pos.shape[0]
        cap = max(8, int(4 * n / self.n_cells**2) + 8)
        members = -np.ones((self.n_cells, self.n_cells, cap), dtype=np.int64)
        counts = np.zeros((self.n_cells, self.n_cells), dtype=np.int64)
        cells = np.empty((n, 2), dtype=np.int64)
        for j in range(n):
            ix, iy = self._cell_of(pos[j, 0], pos[j, 1])
            cells[j] = ix, iy
            if counts[ix, iy] == cap:
                members, cap = _grow_members(members), cap * 2
            members[ix, iy, counts[ix, iy]] = j
            counts[ix, iy] += 1
        return members, counts, cells

    def _cell_of(self, x, y):
        ix = int(math.floor((x + self.side / 2) / self.cell_side)) % self.n_cells
        iy = int(math.floor((y + self.side / 2) / self.cell_side)) % self.n_cells
        return ix, iy


def _grow_members(members):
    grown = -np.ones((members.shape[0], members.shape[1], members.shape[2] * 2),
                     dtype=np.int64)
    grown[:, :, :members.shape[2]] = members
    return grown


@nb.njit(cache=True)
def _delta_energy_cells(pos, j, nx_, ny_, ell, side, table, table_h, cutoff,
                        members, counts, cells, n_cells, cell_side):
    # short-range tabulated torus kernel only
    de = 0.0
    c2 = cutoff * cutoff
    for (px, py, sgn) in ((nx_, ny_, 1.0), (pos[j, 0], pos[j, 1], -1.0)):
        cx = int(math.floor((px + side / 2) / cell_side)) % n_cells
        cy = int(math.floor((py + side / 2) / cell_side)) % n_cells
        for a in range(-1, 2):
            for b in range(-1, 2):
                ix = (cx + a) % n_cells
                iy = (cy + b) % n_cells
                for m in range(counts[ix, iy]):
                    k = members[ix, iy, m]
                    if k == j:
                        continue
                    dx = px - pos[k, 0]
                    dy = py - pos[k, 1]
                    dx -= side * math.floor(dx / side + 0.5)
                    dy -= side * math.floor(dy / side + 0.5)
                    if dx * dx + dy * dy <= c2:
                        de += sgn * torus_yukawa_table(table, table_h, ell, dx, dy)
    return 2.0 * de


# ---------------------------------------------------------------------------
# public energy API
# ---------------------------------------------------------------------------

def _check_distinct(pos: np.ndarray, domain: Domain):
    n = pos.shape[0]
    if n < 2:
        return
    z = pos[:, 0] + 1j * pos[:, 1]
    d = z[:, None] - z[None, :]
    np.fill_diagonal(d, 1.0)
    if np.any(d == 0):
        raise CoincidentPointsError("coincident points")


def total_energy(cfg: PointConfig, model: EnergyModel) -> float:
    """N sum_j V(z_j) + sum_{j != k} G(z_j, z_k), ordered pairs."""
    pos = cfg.points
    _check_distinct(pos, cfg.domain)
    if model.interaction.kind == "coulomb_angle":
        return _total_energy_angle(pos, model)
    p = model.prepared()
    if not p.supported:
        return _total_energy_generic(pos, model)
    return float(_total_energy(pos, p.kind, p.ell, p.side, p.offsets, p.table,
                               p.table_h, p.pot_kind, p.coeffs, p.exterior,
                               p.cond, float(model.n)))


def delta_energy(cfg: PointConfig, model: EnergyModel, j: int, new_pos) -> float:
    """Energy change when particle j moves to new_pos."""
    pos = cfg.points
    new_pos = wrap(np.asarray(new_pos, dtype=float), cfg.domain)
    if np.all(new_pos == pos[j]):
        return 0.0
    other = np.delete(pos, j, axis=0)
    if np.any((other[:, 0] == new_pos[0]) & (other[:, 1] == new_pos[1])):
        raise CoincidentPointsError("move target coincides with another particle")
    if model.interaction.kind == "coulomb_angle":
        return _delta_energy_angle(pos, model, j, new_pos)
    p = model.prepared()
    if not p.supported:
        return _delta_energy_generic(pos, model, j, new_pos)
    return float(_delta_energy(pos, j, new_pos[0], new_pos[1], p.kind, p.ell,
                               p.side, p.offsets, p.table, p.table_h,
                               p.pot_kind, p.coeffs, p.exterior, p.cond,
                               float(model.n)))


def _pair_matrix(pos: np.ndarray, model: EnergyModel) -> np.ndarray:
    from .kernels import torus_yukawa, yukawa
    spec = model.interaction
    z = pos[:, 0] + 1j * pos[:, 1]
    d = z[:, None] - z[None, :]
    np.fill_diagonal(d, 1.0)
    pts = np.column_stack([d.real.ravel(), d.imag.ravel()])
    if spec.kind in ("coulomb", "coulomb_angle"):
        vals = -np.log(np.abs(d.ravel()))
    elif spec.kind == "yukawa":
        vals = yukawa(pts, spec.ell)
    else:
        vals = torus_yukawa(pts, spec.ell, spec.torus_side, spec.truncation)
    M = vals.reshape(d.shape)
    np.fill_diagonal(M, 0.0)
    return M


def _total_energy_generic(pos, model):
    M = _pair_matrix(pos, model)
    ext = model.potential.value(pos).sum() if model.potential is not None else 0.0
    return float(M.sum() + model.n * ext)


def _delta_energy_generic(pos, model, j, new_pos):
    trial = pos.copy()
    trial[j] = new_pos
    return _total_energy_generic(trial, model) - _total_energy_generic(pos, model)


# ---------------------------------------------------------------------------
# angle-perturbed interaction
# ---------------------------------------------------------------------------

def psi_minus(z: np.ndarray, w: np.ndarray, h, dh, theta: float) -> np.ndarray:
    """Psi_minus(z, w) = exp(-|z-w|^2/(2 theta^2)) (h(z)-h(w))/(z-w) with
    the removable diagonal set to dh(z)."""
    z = np.asarray(z, dtype=complex)
    w = np.asarray(w, dtype=complex)
    d = z - w
    small = np.abs(d) < 1e-12
    dsafe = np.where(small, 1.0, d)
    vals = np.exp(-np.abs(d) ** 2 / (2.0 * theta**2)) * (h(z) - h(w)) / dsafe
    if np.any(small):
        vals = np.where(small, dh(z), vals)
    return vals


def angle_pair_kernel(z, w, model: EnergyModel) -> float:
    """Re Psi_minus(z, w) for the active angle block (the pair part of the
    perturbed interaction is C - (t/2) times this)."""
    if model.angle is None:
        raise ValueError("model has no angle block")
    a = model.angle
    zc = complex(z[0], z[1]) if np.asarray(z).ndim else complex(z)
    wc = complex(w[0], w[1]) if np.asarray(w).ndim else complex(w)
    return float(np.real(psi_minus(np.array([zc]), np.array([wc]), a.h, a.dh, a.theta)[0]))


def _total_energy_angle(pos, model: EnergyModel) -> float:
    a = model.angle
    z = pos[:, 0] + 1j * pos[:, 1]
    d = z[:, None] - z[None, :]
    np.fill_diagonal(d, 1.0)
    clog = -np.log(np.abs(d))
    np.fill_diagonal(clog, 0.0)
    hz = a.h(z)
    hd = hz[:, None] - hz[None, :]
    psi = np.exp(-np.abs(d) ** 2 / (2.0 * a.theta**2)) * hd / d
    np.fill_diagonal(psi, 0.0)
    pair = clog.sum() - 0.5 * a.t * np.real(psi).sum()
    vt = model.potential.value(pos).sum() + a.t * a.F(pos).sum()
    return float(pair + model.n * vt + a.const)


def _delta_energy_angle(pos, model: EnergyModel, j, new_pos):
    a = model.angle
    z = pos[:, 0] + 1j * pos[:, 1]
    zj_old = z[j]
    zj_new = complex(new_pos[0], new_pos[1])
    others = np.delete(z, j)
    h_others = a.h(others)

    def one_body(zj):
        d = zj - others
        hj = a.h(np.array([zj]))[0]
        clog = -np.log(np.abs(d)).sum()
        psi = np.exp(-np.abs(d) ** 2 / (2.0 * a.theta**2)) * (hj - h_others) / d
        pt = np.array([[zj.real, zj.imag]])
        vt = model.potential.value(pt)[0] + a.t * a.F(pt)[0]
        return 2.0 * (clog - 0.5 * a.t * np.real(psi).sum()) + model.n * vt

    return float(one_body(zj_new) - one_body(zj_old))


# ---------------------------------------------------------------------------
# split identity of the short-range approximation
# ---------------------------------------------------------------------------

def hamiltonian_split_check(cfg: PointConfig, V: ExternalPotential, mu,
                            ell: float, R: float) -> float:
    """Residual of the exact rewrite of the range-R Hamiltonian in terms
    of the range-ell Hamiltonian with effective potential Q:

        H_Q^ell = H_V^R - N^2 Lbold + N log(R/ell) + N^2 K,

    where Lbold integrates the remainder against the centered empirical
    measure and K against the equilibrium measure.  All equilibrium
    integrals are evaluated by fresh radial quadrature.
    """
    from .equilibrium import _kbar_yukawa, _trapezoid_weights
    from .kernels import remainder, yukawa

    pos = cfg.points
    n = pos.shape[0]
    r_part = np.hypot(pos[:, 0], pos[:, 1])

    # remainder convolved with mu at the particle radii (fresh quadrature)
    w = _trapezoid_weights(mu.rs) * mu.rho * 2.0 * math.pi * mu.rs
    lconv = ((_kbar_yukawa(r_part[:, None], mu.rs[None, :], R)
              - _kbar_yukawa(r_part[:, None], mu.rs[None, :], ell)) @ w)
    K_const = float((( _kbar_yukawa(mu.rs[:, None], mu.rs[None, :], R)
                      - _kbar_yukawa(mu.rs[:, None], mu.rs[None, :], ell)) @ w) @ w)

    def pair_sum(kernel):
        tot = 0.0
        for j in range(n):
            for k in range(j + 1, n):
                tot += kernel(pos[j] - pos[k])
        return 2.0 * tot

    H_R = pair_sum(lambda d: yukawa(d, R)) + n * V.value(pos).sum()
    Q_vals = V.value(pos) + 2.0 * lconv
    H_Q = pair_sum(lambda d: yukawa(d, ell)) + n * Q_vals.sum()

    L_pair = pair_sum(lambda d: remainder(d, ell, R))
    # iint L d(mu_hat - mu) d(mu_hat - mu), diagonal L(0) = log(R/ell)
    Lbold = (L_pair + n * math.log(R / ell)) / n**2 - 2.0 * lconv.sum() / n + K_const
    rhs = H_R - n**2 * Lbold + n * math.log(R / ell) + n**2 * K_const
    return float(abs(H_Q - rhs))
