"""Domains, periodic wrapping, block partitions, and volume-preserving
distortion maps of the torus.

Points are numpy arrays: a single point has shape (2,), a configuration
(N, 2).  The canonical cell of a torus of side b is the half-open square
[-b/2, b/2)^2; ties at +b/2 wrap to -b/2 so every point has exactly one
representative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Domain",
    "PointConfig",
    "BlockPartition",
    "DistortionMap",
    "wrap",
    "torus_diff",
    "partition_profile",
    "distortion_apply",
    "distortion_invert",
    "sample_distortion",
]


@dataclass(frozen=True)
class Domain:
    """Either the full plane or a square torus of side ``side``."""

    kind: str  # "plane" | "torus"
    side: float = 0.0

    def __post_init__(self):
        if self.kind not in ("plane", "torus"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.kind == "torus" and not self.side > 0:
            raise ValueError("torus needs side > 0")

    @property
    def is_torus(self) -> bool:
        return self.kind == "torus"


PLANE = Domain("plane")


def unit_torus() -> Domain:
    return Domain("torus", 1.0)


def wrap(p: np.ndarray, domain: Domain) -> np.ndarray:
    """Map points to the canonical cell [-b/2, b/2)^2; identity on the plane.

    Idempotent, and +b/2 ties land on -b/2.
    """
    p = np.asarray(p, dtype=float)
    if not domain.is_torus:
        return p
    b = domain.side
    out = p - b * np.floor(p / b + 0.5)
    # floating-point roundoff at the upper edge: p/b+0.5 just below an
    # integer can yield out == +b/2; fold it back
    upper = out >= b / 2
    if np.any(upper):
        out = np.where(upper, -b / 2, out)
    return out


def torus_diff(p: np.ndarray, q: np.ndarray, b: float) -> np.ndarray:
    """Minimal-image difference wrap(p - q) on the torus of side b."""
    return wrap(np.asarray(p, dtype=float) - np.asarray(q, dtype=float), Domain("torus", b))


@dataclass
class PointConfig:
    """N particle positions living on a domain.

    Positions are stored canonically (wrapped on a torus); components must
    be finite.
    """

    domain: Domain
    points: np.ndarray  # (N, 2) float64

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise ValueError("points must have shape (N, 2) with N >= 1")
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite coordinates")
        self.points = wrap(pts, self.domain)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def as_complex(self) -> np.ndarray:
        return self.points[:, 0] + 1j * self.points[:, 1]

    def copy(self) -> "PointConfig":
        return PointConfig(self.domain, self.points.copy())


@dataclass(frozen=True)
class BlockPartition:
    """Tiling of the domain by squares of side ``side``, origin shifted by
    ``shift`` in [-side/2, side/2)^2.

    On a torus the block grid must divide the fundamental cell evenly
    (domain.side / side integer).  Block (i, j) covers
    [i*side, (i+1)*side) x [j*side, (j+1)*side) after translating by
    shift - domain.side/2, half-open in both coordinates.
    """

    domain: Domain
    side: float
    shift: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError("block side must be positive")
        if self.domain.is_torus:
            ratio = self.domain.side / self.side
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError("block side must divide the torus side")

    @property
    def blocks_per_side(self) -> int:
        if not self.domain.is_torus:
            raise ValueError("meaningful on a torus only")
        return int(round(self.domain.side / self.side))

    def block_index(self, points: np.ndarray) -> np.ndarray:
        """Integer (N, 2) block coordinates; half-open convention."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.domain.is_torus:
            b = self.domain.side
            rel = wrap(pts - np.asarray(self.shift), self.domain) + b / 2
            k = self.blocks_per_side
            idx = np.floor(rel / self.side).astype(np.int64)
            return np.clip(idx, 0, k - 1)
        return np.floor((pts - np.asarray(self.shift)) / self.side).astype(np.int64)

    def block_centers(self) -> np.ndarray:
        """Centers of all blocks of a torus partition, shape (k*k, 2)."""
        k = self.blocks_per_side
        b = self.domain.side
        edges = -b / 2 + self.side * (np.arange(k) + 0.5)
        cx, cy = np.meshgrid(edges, edges, indexing="ij")
        centers = np.column_stack([cx.ravel(), cy.ravel()]) + np.asarray(self.shift)
        return wrap(centers, self.domain)

    def bulk_mask(self, support_radius: float, margin: float) -> np.ndarray:
        """Classify blocks as bulk: the closed margin-neighborhood of the
        block lies inside the disk of radius ``support_radius``.

        Plane partitions are classified against the same disk; returns a
        boolean array over the torus block grid (k, k).
        """
        k = self.blocks_per_side
        centers = self.block_centers()
        # farthest point of a square block from the origin-centered disk:
        # center distance plus half-diagonal, plus the margin
        half_diag = self.side * math.sqrt(2.0) / 2.0
        dist = np.hypot(centers[:, 0], centers[:, 1])
        return ((dist + half_diag + margin) <= support_radius).reshape(k, k)


def partition_profile(cfg: PointConfig, part: BlockPartition):
    """Particle counts per block.

    Returns a (k, k) integer array on a torus, or a dict keyed by integer
    block coordinates on the plane.  Counts always sum to N.
    """
    idx = part.block_index(cfg.points)
    if part.domain.is_torus:
        k = part.blocks_per_side
        prof = np.zeros((k, k), dtype=np.int64)
        np.add.at(prof, (idx[:, 0], idx[:, 1]), 1)
        return prof
    prof: dict = {}
    for i, j in idx:
        prof[(int(i), int(j))] = prof.get((int(i), int(j)), 0) + 1
    return prof


def _s(x: np.ndarray) -> np.ndarray:
    return np.sin(2.0 * np.pi * x)


@dataclass(frozen=True)
class DistortionMap:
    """Composition of two unit-torus shears plus a uniform shift.

    phi1 shears x by m1*sin(2*pi*y), phi2 shears y by m2*sin(2*pi*x);
    the full map is z -> wrap(phi1(phi2(z)) + (a1, a2)).  Each shear is
    triangular with unit diagonal, so the Jacobian determinant is 1 and
    the map is a measure-preserving bijection of the torus.
    """

    m1: float
    m2: float
    a1: float = 0.0
    a2: float = 0.0
    t: float = 0.0  # amplitude scale the shears were drawn at (metadata)

    def apply(self, p: np.ndarray) -> np.ndarray:
        return distortion_apply(self, p)

    def invert(self, p: np.ndarray) -> np.ndarray:
        return distortion_invert(self, p)


_UNIT = unit_torus()


def distortion_apply(dmap: DistortionMap, p: np.ndarray) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    pts = np.atleast_2d(arr)
    x, y = pts[:, 0], pts[:, 1]
    y2 = y + dmap.m2 * _s(x)            # phi2
    x2 = x + dmap.m1 * _s(y2)           # phi1 (acts on the sheared y)
    out = wrap(np.column_stack([x2 + dmap.a1, y2 + dmap.a2]), _UNIT)
    return out[0] if arr.ndim == 1 else out


def distortion_invert(dmap: DistortionMap, p: np.ndarray) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    pts = np.atleast_2d(arr)
    x, y = pts[:, 0] - dmap.a1, pts[:, 1] - dmap.a2
    x1 = x - dmap.m1 * _s(y)            # phi1^-1
    y1 = y - dmap.m2 * _s(x1)           # phi2^-1
    out = wrap(np.column_stack([x1, y1]), _UNIT)
    return out[0] if arr.ndim == 1 else out


def sample_distortion(rng: np.random.Generator, t: float) -> DistortionMap:
    """Draw shear amplitudes t*X with X uniform on [-1, 1] and a uniform
    shift on the canonical cell."""
    m1, m2 = t * rng.uniform(-1.0, 1.0, size=2)
    a1, a2 = rng.uniform(-0.5, 0.5, size=2)
    return DistortionMap(m1=m1, m2=m2, a1=a1, a2=a2, t=t)
