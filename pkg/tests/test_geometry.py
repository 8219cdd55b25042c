import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from smrf.geometry import (GeometryError, PoseParams, apply_pose, as_polygon, coverage,
                           invert_pose, is_simple, point_in_polygon, rasterize, resample_closed,
                           signed_distance, signed_distance_map, signed_distance_points)

UNIT = [(0, 0), (1, 0), (1, 1), (0, 1)]
C_SHAPE = [(0, 0), (3, 0), (3, 3), (0, 3), (0, 2), (2, 2), (2, 1), (0, 1)]


@pytest.mark.parametrize("p, expected", [((0.5, 0.5), 0.5), ((1.0, 0.5), 0.0), ((3.0, 0.5), -2.0)])
def test_signed_distance_unit_square(p, expected):
    assert signed_distance(p, UNIT) == pytest.approx(expected, abs=1e-12)


def test_point_in_polygon_examples():
    assert point_in_polygon((0.5, 0.5), UNIT)
    assert not point_in_polygon((2, 2), UNIT)
    assert point_in_polygon((0.5, 0.5), C_SHAPE)
    assert not point_in_polygon((0.5, 1.5), C_SHAPE)  # inside the notch


def test_boundary_points_are_inside():
    for p in [(0, 0), (0.3, 0), (1, 0.7), (0, 1), (0.5, 1)]:
        assert point_in_polygon(p, UNIT)
        assert signed_distance(p, UNIT) == 0.0


def test_rasterize_examples():
    assert rasterize(UNIT, 1, 1).tolist() == [[1]]
    assert rasterize([(0, 0), (4, 0), (4, 4), (0, 4)], 8, 8).sum() == 16
    far = [(1000, 1000), (1001, 1000), (1000, 1000.5)]
    assert rasterize(far, 16, 16).sum() == 0


def test_polygon_validation():
    with pytest.raises(GeometryError):
        as_polygon([(0, 0), (1, 1)])
    with pytest.raises(GeometryError):
        as_polygon([(0, 0), (0, 0), (1, 1)])
    with pytest.raises(GeometryError):
        as_polygon([(0, 0), (np.nan, 0), (1, 1)])
    with pytest.raises(GeometryError):
        rasterize(UNIT, 0, 3)
    with pytest.raises(GeometryError):
        PoseParams(scale=0.0)


def test_signed_distance_matches_oracle_random(rng):
    for _ in range(300):
        poly = oracles.star_polygon(rng, int(rng.integers(3, 12)))
        for p in rng.uniform(-6, 6, size=(3, 2)):
            assert signed_distance(p, poly) == pytest.approx(
                oracles.signed_distance(p, poly), abs=1e-9)


def test_vectorised_and_map_agree_with_scalar(rng):
    poly = oracles.star_polygon(rng, 9, cx=8, cy=6, rmin=2, rmax=5)
    pts = rng.uniform(0, 16, size=(50, 2))
    vec = signed_distance_points(pts, poly)
    assert np.allclose(vec, [signed_distance(p, poly) for p in pts], atol=0, rtol=0)
    dmap = signed_distance_map(poly, 16, 12)
    for r, c in [(0, 0), (5, 7), (11, 15), (6, 8)]:
        assert dmap[r, c] == signed_distance((c + 0.5, r + 0.5), poly)


def test_rasterize_matches_point_in_polygon(rng):
    for _ in range(20):
        poly = oracles.star_polygon(rng, int(rng.integers(3, 15)), cx=10, cy=9, rmin=2, rmax=9)
        mask = rasterize(poly, 21, 18)
        brute = np.array([[point_in_polygon((c + 0.5, r + 0.5), poly) for c in range(21)]
                          for r in range(18)])
        assert np.array_equal(mask.astype(bool), brute)


def test_rasterize_vertices_on_pixel_centers():
    # vertices and horizontal edges exactly through pixel centers
    poly = [(0.5, 0.5), (4.5, 0.5), (4.5, 3.5), (2.5, 1.5), (0.5, 3.5)]
    mask = rasterize(poly, 6, 5)
    brute = np.array([[point_in_polygon((c + 0.5, r + 0.5), poly) for c in range(6)]
                      for r in range(5)])
    assert np.array_equal(mask.astype(bool), brute)


def test_coverage_against_supersampling(rng):
    poly = oracles.star_polygon(rng, 10, cx=6, cy=6, rmin=2, rmax=7)  # partly off-raster
    cov = coverage(poly, 12, 12)
    n = 32
    fine = rasterize(np.asarray(poly) * n, 12 * n, 12 * n).astype(float)
    approx = fine.reshape(12, n, 12, n).mean(axis=(1, 3))
    assert np.abs(cov - approx).max() < 0.05
    assert cov.min() >= 0 and cov.max() <= 1


def test_coverage_of_rectangle_is_exact():
    cov = coverage([(2.5, 3.25), (10.2, 3.25), (10.2, 7.7), (2.5, 7.7)], 14, 10)
    assert cov.sum() == pytest.approx(7.7 * 4.45, abs=1e-9)
    assert cov[3, 2] == pytest.approx(0.5 * 0.75)


def test_apply_pose_examples():
    pts = np.array([[1.0, 0.0]])
    assert np.array_equal(apply_pose(pts, PoseParams(), (0, 0)), pts)
    assert np.allclose(apply_pose(pts, PoseParams(scale=2.0), (0, 0)), [[2, 0]])
    assert np.allclose(apply_pose(pts, PoseParams(rotation=math.pi / 2), (0, 0)), [[0, 1]],
                       atol=1e-12)


def test_pose_inverse_round_trip(rng):
    pts = rng.uniform(-50, 50, size=(30, 2))
    for _ in range(20):
        pose = PoseParams(*rng.uniform(-20, 20, 2), rng.uniform(-3, 3), rng.uniform(0.2, 4))
        c = rng.uniform(-10, 10, 2)
        assert np.allclose(invert_pose(apply_pose(pts, pose, c), pose, c), pts, atol=1e-9)


def test_is_simple():
    assert is_simple(C_SHAPE)
    assert not is_simple([(0, 0), (2, 2), (2, 0), (0, 2)])


def test_resample_closed_spacing():
    pts = resample_closed([(0, 0), (10, 0), (10, 10), (0, 10)], spacing=0.5)
    assert len(pts) == 80
    steps = np.hypot(*np.diff(np.vstack([pts, pts[:1]]), axis=0).T)
    assert np.allclose(steps, 0.5)
    assert len(resample_closed(UNIT, spacing=0.5, min_points=64)) == 64


coord = st.floats(-20, 20, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), coord, coord, coord, coord)
def test_abs_distance_is_one_lipschitz(seed, px, py, qx, qy):
    poly = oracles.star_polygon(np.random.default_rng(seed), 7, rmin=1, rmax=8)
    dp = abs(signed_distance((px, py), poly))
    dq = abs(signed_distance((qx, qy), poly))
    assert abs(dp - dq) <= math.hypot(px - qx, py - qy) + 1e-9
