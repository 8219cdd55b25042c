"""Per-pixel features for forest split nodes.

Three families are supported:

* appearance: mean intensity of an odd-sized box at an offset from the pixel,
  optionally minus a second box (clamp-to-edge outside the image);
* position: the raw column or row index of the pixel;
* shape model (SM): signed distance from the pixel center to the boundary of
  a shape generated by the PCA model, positive inside.

Descriptors have a dataclass form for the public API and a compact integer
row form (:data:`CODE_LEN` columns) consumed by the numba kernels. In the row
form an SM descriptor refers to its shape vector by index into a table of
``b`` vectors kept alongside the rows.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numba import njit

from . import geometry
from .shape_model import ShapeModel, sample_params, synthesize

APPEARANCE, POSITION, SM = 0, 1, 2
FAMILIES = ("appearance", "position", "sm")
SINGLE, DIFFERENCE = 0, 1
AXIS_X, AXIS_Y = 0, 1
# family, dx, dy, w, h, mode, dx2, dy2, w2, h2, aux(axis | sm index)
CODE_LEN = 11


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class Appearance:
    offset: tuple[int, int] = (0, 0)
    box: tuple[int, int] = (1, 1)
    mode: str = "single"
    offset2: tuple[int, int] = (0, 0)
    box2: tuple[int, int] = (1, 1)

    def __post_init__(self):
        for w in (*self.box, *self.box2):
            if w < 1 or w % 2 == 0:
                raise FeatureError(f"box sizes must be odd and >= 1, got {w}")
        if self.mode not in ("single", "difference"):
            raise FeatureError(f"unknown appearance mode {self.mode!r}")


@dataclass(frozen=True)
class Position:
    axis: str = "x"

    def __post_init__(self):
        if self.axis not in ("x", "y"):
            raise FeatureError(f"position axis must be 'x' or 'y', got {self.axis!r}")


@dataclass(frozen=True, eq=False)
class ShapeFeature:
    b: np.ndarray

    def key(self) -> bytes:
        return np.ascontiguousarray(self.b, dtype=np.float64).tobytes()

    def __eq__(self, other):
        return isinstance(other, ShapeFeature) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


FeatureDescriptor = Union[Appearance, Position, ShapeFeature]


@dataclass
class FeatureConfig:
    appearance_radius: int = 25
    box_max: int = 11
    family_weights: dict = field(default_factory=lambda: {
        "classic": [1.0, 0.0, 0.0],
        "position": [0.5, 0.5, 0.0],
        "smrf": [0.5, 0.0, 0.5],
    })
    s_feature: float = 1.0
    hist_eq_levels: int = 256
    difference_prob: float = 0.5
    sm_pool_size: int = 200

    @property
    def pad(self) -> int:
        return self.appearance_radius + self.box_max // 2

    def weights_for(self, method: str) -> np.ndarray:
        if method not in self.family_weights:
            raise FeatureError(f"no family weights for method {method!r}")
        w = np.asarray(self.family_weights[method], dtype=np.float64)
        if w.shape != (3,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise FeatureError(f"family weights for {method!r} must be 3 nonnegatives summing to 1")
        return w


def histogram_equalize(img, levels: int = 256) -> np.ndarray:
    """Map intensities through the normalised cumulative histogram.

    ``out = (cdf(q) - cdf_min) / (1 - cdf_min)`` with ``q`` the input quantised
    to ``levels`` bins; a constant image maps to zeros.
    """
    if levels < 2:
        raise FeatureError("levels must be >= 2")
    a = np.asarray(img, dtype=np.float64)
    q = np.clip(np.floor(a * levels), 0, levels - 1).astype(np.int64)
    hist = np.bincount(q.ravel(), minlength=levels)
    cdf = np.cumsum(hist) / q.size
    cdf_min = cdf[cdf > 0].min()
    if cdf_min >= 1.0:
        return np.zeros_like(a)
    return (cdf[q] - cdf_min) / (1.0 - cdf_min)


def integral_image(img, pad: int) -> np.ndarray:
    """Summed-area table of the edge-padded image with a leading zero row/col."""
    padded = np.pad(np.asarray(img, dtype=np.float64), pad, mode="edge")
    out = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1))
    out[1:, 1:] = padded.cumsum(0).cumsum(1)
    return out


@njit(cache=True, nogil=True, inline="always")
def _box_mean(integ, im, cx, cy, w, h, pad):
    hw = w // 2
    hh = h // 2
    x1 = cx - hw + pad
    x2 = cx + hw + pad + 1
    y1 = cy - hh + pad
    y2 = cy + hh + pad + 1
    s = integ[im, y2, x2] - integ[im, y1, x2] - integ[im, y2, x1] + integ[im, y1, x1]
    return s / (w * h)


@njit(cache=True, nogil=True, inline="always")
def feature_value(code, integ, im, x, y, pad, sm_maps):
    """Evaluate one encoded descriptor at integer pixel ``(x, y)`` of image ``im``.

    ``integ`` is a stack of padded integral images, one per image.
    """
    fam = code[0]
    if fam == 0:
        v = _box_mean(integ, im, x + code[1], y + code[2], code[3], code[4], pad)
        if code[5] == 1:
            v -= _box_mean(integ, im, x + code[6], y + code[7], code[8], code[9], pad)
        return v
    if fam == 1:
        if code[10] == 0:
            return float(x)
        return float(y)
    return sm_maps[code[10], y, x]


@njit(cache=True, nogil=True)
def feature_column(code, integ, nimg, nx, ny, pad, sm_maps, out):
    """Evaluate one encoded descriptor at many pixels into ``out``.

    Same values as :func:`feature_value`; the family branch is hoisted out of
    the pixel loop.
    """
    n = nx.shape[0]
    fam = code[0]
    if fam == 0:
        for k in range(n):
            out[k] = _box_mean(integ, nimg[k], nx[k] + code[1], ny[k] + code[2], code[3], code[4], pad)
        if code[5] == 1:
            for k in range(n):
                out[k] -= _box_mean(integ, nimg[k], nx[k] + code[6], ny[k] + code[7], code[8],
                                    code[9], pad)
    elif fam == 1:
        if code[10] == 0:
            for k in range(n):
                out[k] = nx[k]
        else:
            for k in range(n):
                out[k] = ny[k]
    else:
        m = code[10]
        for k in range(n):
            out[k] = sm_maps[m, ny[k], nx[k]]
    return out


def encode(desc: FeatureDescriptor, sm_index: int = -1) -> np.ndarray:
    code = np.zeros(CODE_LEN, dtype=np.int64)
    if isinstance(desc, Appearance):
        code[0] = APPEARANCE
        code[1:5] = (*desc.offset, *desc.box)
        code[5] = DIFFERENCE if desc.mode == "difference" else SINGLE
        code[6:10] = (*desc.offset2, *desc.box2)
    elif isinstance(desc, Position):
        code[0] = POSITION
        code[10] = AXIS_X if desc.axis == "x" else AXIS_Y
    elif isinstance(desc, ShapeFeature):
        code[0] = SM
        code[10] = sm_index
    else:
        raise FeatureError(f"unknown descriptor {desc!r}")
    return code


def decode(code, sm_shapes=None) -> FeatureDescriptor:
    code = [int(c) for c in code]
    if code[0] == APPEARANCE:
        if code[5] == DIFFERENCE:
            return Appearance((code[1], code[2]), (code[3], code[4]), "difference",
                              (code[6], code[7]), (code[8], code[9]))
        return Appearance((code[1], code[2]), (code[3], code[4]))
    if code[0] == POSITION:
        return Position("x" if code[10] == AXIS_X else "y")
    if code[0] == SM:
        if sm_shapes is None:
            raise FeatureError("SM descriptor needs a shape table")
        return ShapeFeature(np.asarray(sm_shapes[code[10]], dtype=np.float64))
    raise FeatureError(f"unknown feature family {code[0]}")


def _odd_sizes(rng, box_max, size):
    return 2 * rng.integers(0, box_max // 2 + 1, size=size) + 1


def sample_codes(rng: np.random.Generator, count: int, weights, config: FeatureConfig,
                 n_sm: int) -> np.ndarray:
    """Draw ``count`` encoded descriptors; SM rows index a pool of ``n_sm`` shapes."""
    w = np.asarray(weights, dtype=np.float64)
    if w[SM] > 0 and n_sm < 1:
        raise FeatureError("SM features requested but the shape pool is empty")
    fam = rng.choice(3, size=count, p=w)
    r = config.appearance_radius
    codes = np.zeros((count, CODE_LEN), dtype=np.int64)
    codes[:, 0] = fam
    codes[:, 1:3] = rng.integers(-r, r + 1, size=(count, 2))
    codes[:, 3] = _odd_sizes(rng, config.box_max, count)
    codes[:, 4] = _odd_sizes(rng, config.box_max, count)
    codes[:, 5] = rng.random(count) < config.difference_prob
    codes[:, 6:8] = rng.integers(-r, r + 1, size=(count, 2))
    codes[:, 8] = _odd_sizes(rng, config.box_max, count)
    codes[:, 9] = _odd_sizes(rng, config.box_max, count)
    aux = rng.integers(0, 2, size=count)
    if n_sm > 0:
        sm_idx = rng.integers(0, n_sm, size=count)
        aux = np.where(fam == SM, sm_idx, aux)
    codes[:, 10] = aux
    app = fam == APPEARANCE
    codes[~app, 1:10] = 0
    single = app & (codes[:, 5] == SINGLE)
    codes[single, 6:10] = (0, 0, 1, 1)
    codes[~app, 3:5] = 1
    codes[~app, 8:10] = 1
    return codes


def sample_descriptor(family_weights, model: ShapeModel | None, rng: np.random.Generator,
                      config: FeatureConfig | None = None) -> FeatureDescriptor:
    """Draw one descriptor; SM descriptors get a fresh ``b`` with bound ``s_feature``."""
    config = config or FeatureConfig()
    w = np.asarray(family_weights, dtype=np.float64)
    if abs(w.sum() - 1.0) > 1e-9:
        raise FeatureError("family weights must sum to 1")
    code = sample_codes(rng, 1, w, config, n_sm=1)[0]
    if code[0] == SM:
        if model is None:
            raise FeatureError("SM descriptor requires a shape model")
        return ShapeFeature(sample_params(model, config.s_feature, rng))
    return decode(code)


class FeatureContext:
    """An image prepared for feature evaluation plus a memo of SM distance maps.

    Distance maps depend only on ``b`` and the image size, so a context can
    share its cache with other images of the same size.
    """

    def __init__(self, image, model: ShapeModel | None = None,
                 config: FeatureConfig | None = None, sm_cache: dict | None = None):
        self.image = np.asarray(image, dtype=np.float64)
        if self.image.ndim != 2:
            raise FeatureError("image must be 2D")
        self.height, self.width = self.image.shape
        self.model = model
        self.config = config or FeatureConfig()
        self.integral = integral_image(self.image, self.config.pad)
        self.sm_cache = {} if sm_cache is None else sm_cache
        self._lock = threading.Lock()

    def sm_map(self, b) -> np.ndarray:
        if self.model is None:
            raise FeatureError("SM features require a shape model")
        b = np.ascontiguousarray(b, dtype=np.float64)
        key = b.tobytes()
        hit = self.sm_cache.get(key)
        if hit is not None:
            return hit
        with self._lock:
            hit = self.sm_cache.get(key)
            if hit is None:
                hit = sm_distance_map(self.model, b, self.width, self.height)
                self.sm_cache[key] = hit
        return hit

    def _box(self, cx, cy, w, h):
        rows = np.clip(np.arange(cy - h // 2, cy + h // 2 + 1), 0, self.height - 1)
        cols = np.clip(np.arange(cx - w // 2, cx + w // 2 + 1), 0, self.width - 1)
        return float(self.image[np.ix_(rows, cols)].mean())

    def eval(self, desc: FeatureDescriptor, p) -> float:
        x, y = int(p[0]), int(p[1])
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise FeatureError(f"pixel {(x, y)} outside {self.width}x{self.height} image")
        if isinstance(desc, Appearance):
            v = self._box(x + desc.offset[0], y + desc.offset[1], *desc.box)
            if desc.mode == "difference":
                v -= self._box(x + desc.offset2[0], y + desc.offset2[1], *desc.box2)
            return v
        if isinstance(desc, Position):
            return float(x if desc.axis == "x" else y)
        if isinstance(desc, ShapeFeature):
            return float(self.sm_map(desc.b)[y, x])
        raise FeatureError(f"unknown descriptor {desc!r}")


def eval_feature(desc: FeatureDescriptor, p, ctx: FeatureContext) -> float:
    return ctx.eval(desc, p)


def sm_polygon(model: ShapeModel, b) -> np.ndarray:
    return synthesize(model, b).reshape(-1, 2)


def sm_distance_map(model: ShapeModel, b, width: int, height: int) -> np.ndarray:
    """Signed distance from every pixel center to the boundary of shape ``b``."""
    return geometry.signed_distance_map(sm_polygon(model, b), width, height)


def split_test(value: float, tau: float) -> bool:
    """Binary node test; ``True`` sends the pixel to the left child."""
    return value >= tau
