"""Polygon and pose primitives.

Polygons are ``(N, 2)`` float arrays of ``(x, y)`` vertices in pixel units,
closed implicitly. Pixel ``(col, row)`` has its center at ``(col + 0.5,
row + 0.5)``. Points on the boundary count as inside everywhere in this
module, so ``signed_distance >= 0`` and ``rasterize`` agree exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

MIN_EDGE = 1e-9


class GeometryError(ValueError):
    """Raised when a polygon or pose violates its contract."""


@dataclass(frozen=True)
class PoseParams:
    """Similarity transform: translation (px), rotation (rad), isotropic scale."""

    tx: float = 0.0
    ty: float = 0.0
    rotation: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise GeometryError(f"pose scale must be positive, got {self.scale}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.tx, self.ty, self.rotation, self.scale)


IDENTITY_POSE = PoseParams()


def as_polygon(poly) -> np.ndarray:
    """Validate and return a contiguous float64 ``(N, 2)`` vertex array."""
    arr = np.ascontiguousarray(poly, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GeometryError(f"polygon must have shape (N, 2), got {arr.shape}")
    if arr.shape[0] < 3:
        raise GeometryError(f"polygon needs at least 3 vertices, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError("polygon has non-finite vertices")
    edges = np.roll(arr, -1, axis=0) - arr
    if np.any(np.hypot(edges[:, 0], edges[:, 1]) <= MIN_EDGE):
        raise GeometryError("polygon has coincident consecutive vertices")
    return arr


@njit(cache=True, nogil=True)
def _seg_dist2(px, py, ax, ay, bx, by):
    dx = bx - ax
    dy = by - ay
    t = ((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    cx = ax + t * dx - px
    cy = ay + t * dy - py
    return cx * cx + cy * cy


@njit(cache=True, nogil=True)
def _inside(px, py, xs, ys):
    # Even-odd crossing count with a half-open vertical rule; exact boundary
    # hits (same crossing abscissa as the rasterizer) count as inside.
    n = xs.shape[0]
    inside = False
    j = n - 1
    for i in range(n):
        ax = xs[j]
        ay = ys[j]
        bx = xs[i]
        by = ys[i]
        if ay == by:
            if py == ay and min(ax, bx) <= px <= max(ax, bx):
                return True
        elif min(ay, by) <= py <= max(ay, by):
            xi = ax + (py - ay) * (bx - ax) / (by - ay)
            if xi == px:
                return True
            if (ay > py) != (by > py) and px < xi:
                inside = not inside
        j = i
    return inside


@njit(cache=True, nogil=True)
def _signed_distance(px, py, xs, ys):
    n = xs.shape[0]
    best = np.inf
    j = n - 1
    for i in range(n):
        d2 = _seg_dist2(px, py, xs[j], ys[j], xs[i], ys[i])
        if d2 < best:
            best = d2
        j = i
    d = math.sqrt(best)
    if _inside(px, py, xs, ys):
        return d
    return -d


@njit(cache=True, nogil=True)
def _signed_distance_points(pts, xs, ys):
    out = np.empty(pts.shape[0])
    for k in range(pts.shape[0]):
        out[k] = _signed_distance(pts[k, 0], pts[k, 1], xs, ys)
    return out


@njit(cache=True, nogil=True)
def _signed_distance_grid(xs, ys, width, height):
    out = np.empty((height, width))
    for r in range(height):
        py = r + 0.5
        for c in range(width):
            out[r, c] = _signed_distance(c + 0.5, py, xs, ys)
    return out


@njit(cache=True, nogil=True)
def _rasterize(xs, ys, width, height):
    n = xs.shape[0]
    mask = np.zeros((height, width), dtype=np.uint8)
    cross = np.empty(n)
    for r in range(height):
        py = r + 0.5
        m = 0
        j = n - 1
        for i in range(n):
            ax = xs[j]
            ay = ys[j]
            bx = xs[i]
            by = ys[i]
            if ay == by:
                if py == ay:
                    lo = min(ax, bx)
                    hi = max(ax, bx)
                    c0 = max(0, int(math.ceil(lo - 0.5)))
                    c1 = min(width - 1, int(math.floor(hi - 0.5)))
                    for c in range(c0, c1 + 1):
                        mask[r, c] = 1
            elif min(ay, by) <= py <= max(ay, by):
                xi = ax + (py - ay) * (bx - ax) / (by - ay)
                fc = math.floor(xi)
                if fc + 0.5 == xi and 0 <= fc < width:
                    mask[r, int(fc)] = 1
                if (ay > py) != (by > py):
                    cross[m] = xi
                    m += 1
            j = i
        if m == 0:
            continue
        xsorted = np.sort(cross[:m])
        # number of crossings strictly right of the pixel center
        k = 0
        for c in range(width):
            px = c + 0.5
            while k < m and xsorted[k] <= px:
                k += 1
            if (m - k) % 2 == 1:
                mask[r, c] = 1
    return mask


@njit(cache=True, nogil=True)
def _accumulate_line(acc, stride, height, x0, y0, x1, y1):
    # signed area accumulation for one edge with x inside [0, stride - 2]
    if y0 == y1:
        return
    sign = 1.0
    if y0 > y1:
        x0, y0, x1, y1 = x1, y1, x0, y0
        sign = -1.0
    dxdy = (x1 - x0) / (y1 - y0)
    x = x0
    if y0 < 0.0:
        x -= y0 * dxdy
    r0 = max(0, int(math.floor(y0)))
    r1 = min(height, int(math.ceil(y1)))
    for r in range(r0, r1):
        base = r * stride
        dy = min(r + 1.0, y1) - max(float(r), y0)
        xn = x + dxdy * dy
        d = dy * sign
        lo, hi = (x, xn) if x < xn else (xn, x)
        lof = math.floor(lo)
        loi = int(lof)
        hii = int(math.ceil(hi))
        if hii <= loi + 1:
            xm = 0.5 * (x + xn) - lof
            acc[base + loi] += d - d * xm
            acc[base + loi + 1] += d * xm
        else:
            inv = 1.0 / (hi - lo)
            f0 = lo - lof
            a0 = 0.5 * inv * (1.0 - f0) ** 2
            f1 = hi - hii + 1.0
            am = 0.5 * inv * f1 * f1
            acc[base + loi] += d * a0
            if hii == loi + 2:
                acc[base + loi + 1] += d * (1.0 - a0 - am)
            else:
                a1 = inv * (1.5 - f0)
                acc[base + loi + 1] += d * (a1 - a0)
                for c in range(loi + 2, hii - 1):
                    acc[base + c] += d * inv
                a2 = a1 + (hii - loi - 3) * inv
                acc[base + hii - 1] += d * (1.0 - a2 - am)
            acc[base + hii] += d * am
        x = xn


@njit(cache=True, nogil=True)
def _coverage(xs, ys, width, height):
    stride = width + 2
    acc = np.zeros(height * stride + stride)
    n = xs.size
    ts = np.empty(4)
    for i in range(n):
        ax, ay = xs[i], ys[i]
        bx, by = xs[(i + 1) % n], ys[(i + 1) % n]
        # split at the vertical raster borders, then clamp each piece
        m = 0
        ts[m] = 0.0
        m += 1
        if bx != ax:
            for edge in (0.0, float(width)):
                t = (edge - ax) / (bx - ax)
                if 0.0 < t < 1.0:
                    ts[m] = t
                    m += 1
        ts[m] = 1.0
        m += 1
        ts[:m].sort()
        for j in range(m - 1):
            ta, tb = ts[j], ts[j + 1]
            px = min(max(ax + ta * (bx - ax), 0.0), float(width))
            qx = min(max(ax + tb * (bx - ax), 0.0), float(width))
            _accumulate_line(acc, stride, height, px, ay + ta * (by - ay), qx,
                             ay + tb * (by - ay))
    out = np.empty((height, width))
    for r in range(height):
        s = 0.0
        base = r * stride
        for c in range(width):
            s += acc[base + c]
            out[r, c] = min(abs(s), 1.0)
    return out


def point_in_polygon(p, poly) -> bool:
    """Even-odd test; points exactly on an edge are inside."""
    v = as_polygon(poly)
    return bool(_inside(float(p[0]), float(p[1]), v[:, 0].copy(), v[:, 1].copy()))


def signed_distance(p, poly) -> float:
    """Shortest distance from ``p`` to the polygon boundary, positive inside."""
    v = as_polygon(poly)
    return float(_signed_distance(float(p[0]), float(p[1]), v[:, 0].copy(), v[:, 1].copy()))


def signed_distance_points(points, poly) -> np.ndarray:
    """Vectorised :func:`signed_distance` over an ``(M, 2)`` point array."""
    v = as_polygon(poly)
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
    return _signed_distance_points(pts, v[:, 0].copy(), v[:, 1].copy())


def signed_distance_map(poly, width: int, height: int) -> np.ndarray:
    """Signed distance sampled at every pixel center, shape ``(height, width)``."""
    v = as_polygon(poly)
    return _signed_distance_grid(v[:, 0].copy(), v[:, 1].copy(), int(width), int(height))


def rasterize(poly, width: int, height: int) -> np.ndarray:
    """Binary ``uint8`` mask of pixels whose centers lie inside ``poly``."""
    if width < 1 or height < 1:
        raise GeometryError("raster dimensions must be positive")
    v = as_polygon(poly)
    return _rasterize(v[:, 0].copy(), v[:, 1].copy(), int(width), int(height))


def coverage(poly, width: int, height: int) -> np.ndarray:
    """Exact fraction of each pixel square covered by ``poly`` (antialiased mask)."""
    if width < 1 or height < 1:
        raise GeometryError("raster dimensions must be positive")
    v = as_polygon(poly)
    return _coverage(v[:, 0].copy(), v[:, 1].copy(), int(width), int(height))


def centroid(points) -> np.ndarray:
    """Mean of the vertices (the landmark centroid, not the area centroid)."""
    return np.asarray(points, dtype=np.float64).reshape(-1, 2).mean(axis=0)


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def apply_pose(points, pose: PoseParams, center) -> np.ndarray:
    """``p' = s R (p - center) + center + t`` for every row of ``points``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    c = np.asarray(center, dtype=np.float64)
    rot = pose.scale * _rotation(pose.rotation)
    return (pts - c) @ rot.T + c + np.array([pose.tx, pose.ty])


def invert_pose(points, pose: PoseParams, center) -> np.ndarray:
    """Analytic inverse of :func:`apply_pose` with the same ``center``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    c = np.asarray(center, dtype=np.float64)
    q = (pts - c - np.array([pose.tx, pose.ty])) / pose.scale
    return q @ _rotation(pose.rotation) + c


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 * d2 < 0 and d3 * d4 < 0:
        return True
    # touching/collinear contacts also break simplicity
    def on_seg(a, b, c):
        return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
                and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))

    return ((d1 == 0 and on_seg(q1, q2, p1)) or (d2 == 0 and on_seg(q1, q2, p2))
            or (d3 == 0 and on_seg(p1, p2, q1)) or (d4 == 0 and on_seg(p1, p2, q2)))


def is_simple(poly) -> bool:
    """True if no two non-adjacent edges intersect (O(N^2) pair test)."""
    v = as_polygon(poly)
    n = len(v)
    for i in range(n):
        a1, a2 = v[i], v[(i + 1) % n]
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(a1, a2, v[j], v[(j + 1) % n]):
                return False
    return True


def polygon_perimeter(poly) -> float:
    v = np.asarray(poly, dtype=np.float64)
    e = np.roll(v, -1, axis=0) - v
    return float(np.hypot(e[:, 0], e[:, 1]).sum())


def resample_closed(poly, spacing: float = 0.5, min_points: int = 64) -> np.ndarray:
    """Resample a closed polyline at equal arc-length steps.

    The step is ``spacing`` px unless that would give fewer than
    ``min_points`` samples.
    """
    v = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    closed = np.vstack([v, v[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    if total <= 0:
        raise GeometryError("cannot resample a zero-length boundary")
    count = max(min_points, int(math.ceil(total / spacing)))
    s = np.arange(count) * (total / count)
    return np.column_stack([np.interp(s, arc, closed[:, 0]), np.interp(s, arc, closed[:, 1])])
