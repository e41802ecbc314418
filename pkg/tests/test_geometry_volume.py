import math

import numpy as np
import pytest

from bbm_sausage.bbm_core import BudgetExceededError
from bbm_sausage.geometry_volume import (
    PointCloud,
    SpatialHash,
    covers_ball,
    sausage_radius_outer,
    uniform_in_ball,
    volume_exact_1d,
    volume_mc,
    volume_voxel,
)
from bbm_sausage.stats import generator
from bbm_sausage.theory import unit_ball_volume


def brute_force_contains(centers, points, radius):
    diff = points[:, None, :] - centers[None, :, :]
    return (np.einsum("ijk,ijk->ij", diff, diff) <= radius * radius).any(axis=1)


def test_exact_1d_union():
    cloud = PointCloud.from_points([0.0, 0.5, 2.0], 1)
    assert volume_exact_1d(cloud, 0.5).value == pytest.approx(2.5)


def test_exact_1d_single_and_duplicates():
    assert volume_exact_1d(PointCloud.from_points([3.0], 1), 0.7).value == pytest.approx(1.4)
    doubled = PointCloud.from_points([0.0, 0.0, 1.0, 1.0, 5.0], 1)
    unique = PointCloud.from_points([0.0, 1.0, 5.0], 1)
    assert volume_exact_1d(doubled, 0.3).value == volume_exact_1d(unique, 0.3).value


def test_exact_1d_rejects_higher_dimensions():
    with pytest.raises(ValueError):
        volume_exact_1d(PointCloud.from_points([[0.0, 0.0]]), 1.0)


def test_empty_cloud_has_zero_volume():
    empty = PointCloud.from_points(np.empty((0, 2)), 2)
    assert empty.size == 0
    assert volume_mc(empty, 1.0, 10_000, seed=1).value == 0.0
    assert volume_voxel(empty, 1.0, 0.1).value == 0.0


def test_spatial_hash_matches_brute_force():
    rng = generator(9, "hash-test")
    for d in (1, 2, 3):
        centers = rng.random((200, d)) * 5.0
        queries = rng.random((2000, d)) * 6.0 - 0.5
        hasher = SpatialHash(PointCloud.from_points(centers, d), 0.4)
        np.testing.assert_array_equal(
            hasher.contains(queries), brute_force_contains(centers, queries, 0.4)
        )


def test_spatial_hash_with_tiny_radius_over_a_wide_cloud():
    """Radius 1e-6 over a span of 20 in d=3 needs more cells than an int64 key can index."""
    rng = generator(11, "tiny-radius")
    centers = rng.random((300, 3)) * 20.0
    near = centers[:100] + rng.standard_normal((100, 3)) * 5e-7
    queries = np.concatenate([near, rng.random((2000, 3)) * 20.0])
    hasher = SpatialHash(PointCloud.from_points(centers, 3), 1e-6)
    np.testing.assert_array_equal(
        hasher.contains(queries), brute_force_contains(centers, queries, 1e-6)
    )


def test_spatial_hash_rejects_zero_radius():
    with pytest.raises(ValueError):
        SpatialHash(PointCloud.from_points([[0.0, 0.0]]), 0.0)


def test_voxel_disk_area():
    """One disk of radius 1 at voxel 0.01 comes within 2% of pi."""
    estimate = volume_voxel(PointCloud.from_points([[0.0, 0.0]]), 1.0, 0.01)
    assert estimate.value == pytest.approx(math.pi, rel=0.02)
    assert estimate.std_error > 0


def test_voxel_additivity_for_separated_balls():
    a = volume_voxel(PointCloud.from_points([[0.0, 0.0]]), 1.0, 0.05).value
    b = volume_voxel(PointCloud.from_points([[0.3, 0.1]]), 1.0, 0.05).value
    both = volume_voxel(PointCloud.from_points([[0.0, 0.0], [10.3, 0.1]]), 1.0, 0.05).value
    assert both == pytest.approx(a + b, rel=0.01)


def test_voxel_rejects_coarse_voxels_and_budget():
    cloud = PointCloud.from_points([[0.0, 0.0], [100.0, 100.0]])
    with pytest.raises(ValueError):
        volume_voxel(cloud, 1.0, 0.5)
    with pytest.raises(BudgetExceededError, match="voxel size"):
        volume_voxel(cloud, 1.0, 0.01, max_voxels=1000)


def test_mc_is_deterministic():
    cloud = PointCloud.from_points(generator(3, "cloud").random((50, 2)))
    a = volume_mc(cloud, 0.2, 50_000, seed=77)
    b = volume_mc(cloud, 0.2, 50_000, seed=77, workers=4)
    assert a == b


def test_mc_degenerate_cases():
    cloud = PointCloud.from_points([[1.0, 2.0]])
    assert volume_mc(cloud, 0.0, 5000, seed=1).value == 0.0
    with pytest.raises(ValueError):
        volume_mc(cloud, 1.0, 10, seed=1)


def test_mc_single_ball_volume():
    """A single unit ball in d=3 is within 3 standard errors of 4*pi/3."""
    estimate = volume_mc(PointCloud.from_points([[0.0, 0.0, 0.0]]), 1.0, 1_000_000, seed=5)
    assert abs(estimate.value - 4.0 * math.pi / 3.0) < 3.0 * estimate.std_error


def test_mc_matches_exact_in_one_dimension():
    rng = generator(17, "mc-vs-exact")
    for trial in range(5):
        cloud = PointCloud.from_points(rng.random(30) * 10.0, 1)
        exact = volume_exact_1d(cloud, 0.2).value
        estimate = volume_mc(cloud, 0.2, 200_000, seed=trial)
        assert abs(estimate.value - exact) < 3.0 * estimate.std_error + 1e-12


@pytest.mark.slow
@pytest.mark.parametrize("d, voxel", [(1, 0.002), (2, 0.02), (3, 0.05)])
def test_voxel_agrees_with_mc_on_random_clouds(d, voxel):
    rng = generator(23, "voxel-vs-mc", d)
    for trial in range(10):
        cloud = PointCloud.from_points(rng.random((50, d)) * 4.0, d)
        estimate = volume_voxel(cloud, 0.4, voxel)
        mc = volume_mc(cloud, 0.4, 200_000, seed=trial)
        assert abs(estimate.value - mc.value) < 3.0 * (estimate.std_error + mc.std_error)


def test_exact_1d_monotone_in_centers_and_radius():
    rng = generator(31, "monotone-1d")
    centers = rng.random(40) * 10.0
    volumes = [
        volume_exact_1d(PointCloud.from_points(centers[:n], 1), 0.2).value
        for n in range(1, 41)
    ]
    assert all(b >= a for a, b in zip(volumes, volumes[1:]))
    cloud = PointCloud.from_points(centers, 1)
    by_radius = [volume_exact_1d(cloud, r).value for r in (0.05, 0.1, 0.2, 0.4, 0.8)]
    assert all(b >= a for a, b in zip(by_radius, by_radius[1:]))


def test_spatial_hash_coverage_monotone_in_centers_and_radius():
    """On a fixed set of sample points the covered set only grows."""
    rng = generator(37, "monotone-hash")
    centers = rng.random((60, 2)) * 5.0
    points = rng.random((20_000, 2)) * 6.0 - 0.5
    covered = SpatialHash(PointCloud.from_points(centers[:20]), 0.3).contains(points)
    for n in (40, 60):
        more = SpatialHash(PointCloud.from_points(centers[:n]), 0.3).contains(points)
        assert np.all(more >= covered)
        covered = more
    wider = SpatialHash(PointCloud.from_points(centers), 0.45).contains(points)
    assert np.all(wider >= covered)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_union_volume_between_one_ball_and_disjoint_sum(d):
    rng = generator(41, "union-bounds", d)
    n, radius = 25, 0.3
    cloud = PointCloud.from_points(rng.random((n, d)) * 2.0, d)
    ball = unit_ball_volume(d) * radius**d
    estimate = volume_mc(cloud, radius, 200_000, seed=d)
    slack = 3.0 * estimate.std_error
    assert ball - slack <= estimate.value <= n * ball + slack
    if d == 1:
        exact = volume_exact_1d(cloud, radius).value
        assert ball <= exact <= n * ball + 1e-12


def test_sausage_radius_outer():
    assert sausage_radius_outer(1.0, 2, 0.02) == pytest.approx(1.0 + 3.0 * 0.2)


def test_uniform_in_ball_stays_inside():
    points = uniform_in_ball(generator(1, "ball"), [1.0, -1.0, 2.0], 0.5, 5000)
    assert points.shape == (5000, 3)
    assert np.all(np.linalg.norm(points - [1.0, -1.0, 2.0], axis=1) <= 0.5 + 1e-12)


def test_covers_ball():
    big = PointCloud.from_points([[0.0, 0.0]])
    assert covers_ball(big, 2.0, [0.0, 0.0], 1.0, 1000, seed=4) == (True, 0.0)
    empty = PointCloud.from_points(np.empty((0, 2)), 2)
    assert covers_ball(empty, 2.0, [0.0, 0.0], 1.0, 1000, seed=4) == (False, 1.0)
    covered, missed = covers_ball(big, 0.5, [0.0, 0.0], 1.0, 10_000, seed=4)
    assert not covered
    assert missed == pytest.approx(0.75, abs=0.03)
