import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2

from plasmalab.geometry import (BlockPartition, DistortionMap, Domain,
                                PLANE, PointConfig, distortion_apply,
                                distortion_invert, partition_profile,
                                sample_distortion, torus_diff, unit_torus,
                                wrap)

TORUS = unit_torus()

coords = st.floats(min_value=-50, max_value=50, allow_nan=False,
                   allow_infinity=False)


def test_wrap_examples():
    assert np.allclose(wrap(np.array([0.7, 0.0]), TORUS), [-0.3, 0.0])
    assert np.allclose(wrap(np.array([0.5, -0.5]), TORUS), [-0.5, -0.5])
    assert np.allclose(wrap(np.array([3.2, -1.1]), PLANE), [3.2, -1.1])


@given(coords, coords)
@settings(max_examples=200)
def test_wrap_idempotent_and_canonical(x, y):
    p = wrap(np.array([x, y]), TORUS)
    assert np.all(p >= -0.5) and np.all(p < 0.5)
    assert np.allclose(wrap(p, TORUS), p, atol=0)


def test_wrap_idempotence_bulk(rng):
    pts = rng.uniform(-1000, 1000, size=(10**6, 2))
    w1 = wrap(pts, TORUS)
    assert np.array_equal(wrap(w1, TORUS), w1)
    assert w1.min() >= -0.5 and w1.max() < 0.5


def test_torus_diff_examples():
    assert np.allclose(torus_diff(np.array([0.4, 0.0]), np.array([-0.4, 0.0]), 1.0),
                       [-0.2, 0.0])
    p = np.array([0.123, -0.4])
    assert np.allclose(torus_diff(p, p, 1.0), [0.0, 0.0])
    # tie broken into the half-open cell
    d = torus_diff(np.array([0.25, 0.25]), np.array([-0.25, -0.25]), 1.0)
    assert np.allclose(d, [-0.5, -0.5])


@given(coords, coords, coords, coords)
@settings(max_examples=200)
def test_torus_diff_antisymmetry(x1, y1, x2, y2):
    p = wrap(np.array([x1, y1]), TORUS)
    q = wrap(np.array([x2, y2]), TORUS)
    s = torus_diff(p, q, 1.0) + torus_diff(q, p, 1.0)
    assert np.allclose(wrap(s, TORUS), [0.0, 0.0], atol=1e-12)


def test_partition_block_centers_and_counts():
    part = BlockPartition(TORUS, 0.5)
    centers = part.block_centers()
    cfg = PointConfig(TORUS, centers)
    prof = partition_profile(cfg, part)
    assert prof.shape == (2, 2)
    assert np.all(prof == 1)


def test_partition_all_in_one_block():
    part = BlockPartition(TORUS, 0.25)
    pts = np.full((17, 2), 0.1) + np.linspace(0, 0.01, 17)[:, None]
    prof = partition_profile(PointConfig(TORUS, pts), part)
    assert prof.sum() == 17
    assert prof.max() == 17
    assert (prof > 0).sum() == 1


def test_partition_uniform_poisson_band(rng):
    n = 10**4
    part = BlockPartition(TORUS, 0.25)
    pts = rng.uniform(-0.5, 0.5, size=(n, 2))
    prof = partition_profile(PointConfig(TORUS, pts), part)
    assert prof.sum() == n
    expected = n / 16
    assert np.all(np.abs(prof - expected) < 5 * math.sqrt(expected))


def test_partition_conservation_random_sides(rng):
    for k in (2, 4, 5, 8):
        part = BlockPartition(TORUS, 1.0 / k)
        pts = rng.uniform(-0.5, 0.5, size=(321, 2))
        prof = partition_profile(PointConfig(TORUS, pts), part)
        assert prof.sum() == 321


def test_partition_plane_dict(rng):
    part = BlockPartition(PLANE, 0.5)
    pts = rng.normal(0, 2, size=(100, 2))
    prof = partition_profile(PointConfig(PLANE, pts), part)
    assert sum(prof.values()) == 100


def test_bulk_mask_margin():
    part = BlockPartition(TORUS, 0.125)
    mask = part.bulk_mask(support_radius=0.45, margin=0.05)
    centers = part.block_centers().reshape(8, 8, 2)
    dist = np.hypot(centers[..., 0], centers[..., 1])
    half_diag = 0.125 * math.sqrt(2) / 2
    assert np.array_equal(mask, dist + half_diag + 0.05 <= 0.45)
    assert mask.any() and not mask.all()


def test_distortion_identity():
    dm = DistortionMap(m1=0.0, m2=0.0)
    p = np.array([0.3, -0.2])
    assert np.allclose(dm.apply(p), p)


def test_distortion_shear_example():
    # x shifted by m1 sin(2 pi y) = 0.1 sin(pi/2) = 0.1
    dm = DistortionMap(m1=0.1, m2=0.0)
    out = dm.apply(np.array([0.0, 0.25]))
    assert np.allclose(out, [0.1, 0.25], atol=1e-15)


@given(st.floats(-0.2, 0.2), st.floats(-0.2, 0.2),
       st.floats(-0.5, 0.4999), st.floats(-0.5, 0.4999),
       st.floats(-0.5, 0.4999), st.floats(-0.5, 0.4999))
@settings(max_examples=200)
def test_distortion_roundtrip(m1, m2, a1, a2, x, y):
    dm = DistortionMap(m1=m1, m2=m2, a1=a1, a2=a2)
    p = np.array([x, y])
    back = distortion_invert(dm, distortion_apply(dm, p))
    d = wrap(back - p, TORUS)
    assert np.max(np.abs(d)) < 1e-12


def test_distortion_jacobian_fd(rng):
    for _ in range(20):
        dm = sample_distortion(rng, t=0.15)
        p = rng.uniform(-0.45, 0.45, 2)
        h = 1e-5
        jac = np.zeros((2, 2))
        for c in range(2):
            dp = np.zeros(2)
            dp[c] = h
            forward = distortion_apply(dm, p + dp)
            backward = distortion_apply(dm, p - dp)
            diff = wrap(forward - backward, TORUS)
            jac[:, c] = diff / (2 * h)
        assert abs(np.linalg.det(jac) - 1.0) < 1e-6


def test_distortion_pushforward_uniform(rng):
    """Volume preservation: the image of uniform points stays uniform
    (chi-square over a 32 x 32 histogram)."""
    n = 10**6
    dm = sample_distortion(rng, t=0.2)
    pts = rng.uniform(-0.5, 0.5, size=(n, 2))
    img = distortion_apply(dm, pts)
    hist, _, _ = np.histogram2d(img[:, 0], img[:, 1], bins=32,
                                range=[[-0.5, 0.5], [-0.5, 0.5]])
    expected = n / 1024
    stat = np.sum((hist - expected) ** 2 / expected)
    # p > 0.001
    assert stat < chi2.ppf(0.999, 1023)


def test_pointconfig_rejects_nonfinite():
    with pytest.raises(ValueError):
        PointConfig(PLANE, np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError):
        PointConfig(TORUS, np.array([[np.inf, 0.0]]))


def test_blockpartition_requires_divisibility():
    with pytest.raises(ValueError):
        BlockPartition(TORUS, 0.3)
