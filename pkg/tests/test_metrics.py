import math

import numpy as np
import pytest

import oracles
from smrf.metrics import (CannyConfig, EmptyBoundaryError, MetricError, boundary_distance, canny,
                          extract_boundary, mask_metrics, polygon_points, threshold_contour, to_mm)


def circle(cx, cy, r, n=4000):
    t = np.linspace(0, 2 * math.pi, n, endpoint=False)
    return np.column_stack([cx + r * np.cos(t), cy + r * np.sin(t)])


def disk(size, cx, cy, r):
    yy, xx = np.mgrid[:size, :size]
    return ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r).astype(float)


def test_mask_metric_examples():
    a = np.zeros((10, 10), bool)
    a[2:5, 2:5] = True
    assert mask_metrics(a, a) == (1.0, 1.0, 1.0)
    p, t = np.zeros((10, 10), bool), np.zeros((10, 10), bool)
    p[0] = True
    t[9] = True
    assert mask_metrics(p, t) == pytest.approx((0.8, 0.0, 0.0))
    A, B = np.array([[1, 1]]), np.array([[0, 1]])
    acc, dice, jac = mask_metrics(A, B)
    assert (acc, dice, jac) == pytest.approx((0.5, 2 / 3, 0.5), abs=1e-15)


def test_mask_metric_conventions():
    z = np.zeros((4, 4))
    assert mask_metrics(z, z) == (1.0, 1.0, 1.0)
    one = z.copy()
    one[1, 1] = 1
    assert mask_metrics(one, z)[1:] == (0.0, 0.0)
    with pytest.raises(MetricError):
        mask_metrics(z, np.zeros((4, 5)))


def test_mask_metrics_match_confusion_oracle(rng):
    for _ in range(100):
        shape = tuple(rng.integers(1, 20, 2))
        a = rng.random(shape) < rng.random()
        b = rng.random(shape) < rng.random()
        acc, dice, jac = mask_metrics(a, b)
        tp, fp, fn, tn = oracles.confusion(a, b)
        assert acc == (tp + tn) / a.size
        if tp + fp + fn:
            assert dice == 2 * tp / (2 * tp + fp + fn)
            assert jac == tp / (tp + fp + fn)
        assert abs(jac - dice / (2 - dice)) <= 1e-12


def test_boundary_distance_examples():
    sq = lambda h: [(50 - h, 50 - h), (50 + h, 50 - h), (50 + h, 50 + h), (50 - h, 50 + h)]
    a = polygon_points(sq(10))
    assert boundary_distance(a, a) == (0.0, 0.0)
    mad, hd = boundary_distance(a, polygon_points(sq(12)))
    assert mad == pytest.approx(2.0, abs=0.1)
    # the worst point is a corner, 2 * sqrt(2) from the other square's corner
    assert hd == pytest.approx(2 * math.sqrt(2), abs=1e-9)


def test_translated_circle_hausdorff_is_shift_length():
    mad, hd = boundary_distance(circle(60, 60, 25), circle(63, 64, 25))
    assert hd == pytest.approx(5.0, abs=0.1)
    assert mad <= hd


def test_distance_symmetry_and_order(rng):
    for _ in range(50):
        a = rng.normal(size=(int(rng.integers(1, 40)), 2)) * 5
        b = rng.normal(size=(int(rng.integers(1, 40)), 2)) * 5 + rng.normal(size=2)
        mad, hd = boundary_distance(a, b)
        assert (mad, hd) == boundary_distance(b, a)
        assert hd >= mad >= 0


def test_empty_boundary():
    with pytest.raises(EmptyBoundaryError):
        boundary_distance(np.zeros((0, 2)), [(0, 0)])


def test_canny_constant_and_step():
    with pytest.raises(EmptyBoundaryError):
        extract_boundary(np.full((32, 32), 0.4), "canny")
    step = np.zeros((40, 40))
    step[:, 20:] = 1.0
    edges = canny(step)
    cols = np.nonzero(edges)[1]
    assert edges.any()
    # the step lies between columns 19 and 20, at x = 20 in point coordinates
    assert np.all(np.abs(cols + 0.5 - 20.0) <= 1.0)
    # every row carries the edge
    assert set(np.nonzero(edges)[0]) == set(range(40))


def test_canny_config_validation():
    with pytest.raises(MetricError):
        canny(np.zeros((5, 5)), CannyConfig(kernel_size=4))
    with pytest.raises(MetricError):
        canny(np.zeros((5, 5)), CannyConfig(low=0.5, high=0.3))


@pytest.mark.parametrize("r", [10, 20, 30, 45])
def test_disk_contour_count(r):
    pts = threshold_contour(disk(128, 64, 64, r))
    expected = oracles.midpoint_circle_count(r)
    assert abs(len(pts) - expected) <= 0.1 * expected


def test_threshold_contour_keeps_largest_component():
    m = disk(100, 30, 30, 12) + disk(100, 75, 75, 5)
    pts = threshold_contour(m)
    assert np.all(np.hypot(pts[:, 0] - 30.5, pts[:, 1] - 30.5) < 14)
    with pytest.raises(EmptyBoundaryError):
        threshold_contour(np.zeros((10, 10)))
    with pytest.raises(MetricError):
        extract_boundary(m, "sobel")


def test_to_mm():
    assert to_mm(4.0, None) is None
    assert to_mm(4.0, 0.25) == 1.0
