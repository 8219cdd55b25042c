"""Overlap and boundary-distance metrics plus baseline boundary extraction.

Boundary points are in the same continuous coordinates as polygons: pixel
``(row r, col c)`` has its center at ``(c + 0.5, r + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import resample_closed


class MetricError(ValueError):
    pass


class EmptyBoundaryError(MetricError):
    """No boundary could be extracted; distance metrics are undefined."""


@dataclass(frozen=True)
class CannyConfig:
    sigma: float = 1.4
    kernel_size: int = 5
    low: float = 0.1  # fractions of the maximum gradient magnitude
    high: float = 0.3

    def validate(self):
        if self.sigma <= 0 or self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise MetricError("canny needs sigma > 0 and an odd kernel size")
        if not 0 < self.low <= self.high <= 1:
            raise MetricError("canny thresholds must satisfy 0 < low <= high <= 1")


def _binary(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2 or m.size == 0:
        raise MetricError("masks must be nonempty 2D arrays")
    return m > 0


def mask_metrics(pred, truth) -> tuple[float, float, float]:
    """(accuracy, dice, jaccard); two empty masks score 1 on dice and jaccard."""
    a, b = _binary(pred), _binary(truth)
    if a.shape != b.shape:
        raise MetricError(f"mask dimensions differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    accuracy = float(np.count_nonzero(a == b)) / a.size
    if union == 0:
        return accuracy, 1.0, 1.0
    return accuracy, 2.0 * inter / total, inter / union


def _points(p) -> np.ndarray:
    pts = np.asarray(p, dtype=np.float64)
    if pts.size == 0:
        raise EmptyBoundaryError("empty boundary")
    pts = pts.reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise MetricError("boundary points must be finite")
    return pts


def boundary_distance(pred_points, truth_points) -> tuple[float, float]:
    """Symmetric mean absolute distance and Hausdorff distance between point sets."""
    a, b = _points(pred_points), _points(truth_points)
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    mad = 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))
    hd = max(float(d_ab.max()), float(d_ba.max()))
    return mad, hd


def polygon_points(poly, spacing: float = 0.5, min_points: int = 64) -> np.ndarray:
    """Arc-length samples of a closed polygon for use with ``boundary_distance``."""
    return resample_closed(poly, spacing, min_points)


def _gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _non_max_suppression(mag, gx, gy) -> np.ndarray:
    # quantize gradient direction to 0/45/90/135 degrees and compare neighbours
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    p = np.pad(mag, 1)
    h, w = mag.shape
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (dr, dc) in offsets.items():
        fwd = p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        bwd = p[1 - dr:1 - dr + h, 1 - dc:1 - dc + w]
        sel = sector == s
        keep |= sel & (mag >= fwd) & (mag >= bwd)
    return keep & (mag > 0)


def canny(image, config: CannyConfig | None = None) -> np.ndarray:
    """Boolean edge map."""
    config = config or CannyConfig()
    config.validate()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise MetricError("canny needs a nonempty 2D map")
    g = _gaussian_kernel(config.sigma, config.kernel_size)
    smooth = ndimage.convolve1d(img, g, axis=0, mode="nearest")
    smooth = ndimage.convolve1d(smooth, g, axis=1, mode="nearest")
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return np.zeros(img.shape, dtype=bool)
    thin = _non_max_suppression(mag, gx, gy)
    weak = thin & (mag >= config.low * peak)
    strong = thin & (mag >= config.high * peak)
    labels, _ = ndimage.label(weak, structure=np.ones((3, 3)))
    ids = np.unique(labels[strong])
    return np.isin(labels, ids[ids > 0])


def _pixel_centers(mask) -> np.ndarray:
    rows, cols = np.nonzero(mask)
    return np.column_stack([cols + 0.5, rows + 0.5]).astype(np.float64)


def threshold_contour(prob_map, level: float = 0.5) -> np.ndarray:
    """Outer boundary pixels of the largest 8-connected region above ``level``."""
    m = np.asarray(prob_map, dtype=np.float64) >= level
    labels, n = ndimage.label(m, structure=np.ones((3, 3)))
    if n == 0:
        raise EmptyBoundaryError("map has no pixel above the threshold")
    sizes = ndimage.sum_labels(m, labels, index=np.arange(1, n + 1))
    region = ndimage.binary_fill_holes(labels == int(np.argmax(sizes)) + 1)
    inner = ndimage.binary_erosion(region, structure=ndimage.generate_binary_structure(2, 1),
                                   border_value=0)
    return _pixel_centers(region & ~inner)


def extract_boundary(prob_map, method: str = "canny", canny_config: CannyConfig | None = None):
    """Boundary pixel centers of a probability map, shape ``(n, 2)``."""
    if method == "canny":
        edges = canny(prob_map, canny_config)
        if not edges.any():
            raise EmptyBoundaryError("no edge pixels found")
        return _pixel_centers(edges)
    if method == "threshold_contour":
        return threshold_contour(prob_map)
    raise MetricError(f"unknown boundary method {method!r}")


def to_mm(value_px: float, pixel_spacing_mm: float | None) -> float | None:
    return None if pixel_spacing_mm is None else value_px * pixel_spacing_mm
