"""Synthetic myocardium-like phantoms with ground-truth landmarks.

Each phantom is a horseshoe (elliptical ring sector, apex up, open towards
the bottom) standing in for the left-ventricular wall in an apical view.
The image is a piecewise-constant region map (myocardium, chamber,
background) degraded by multiplicative speckle and a vertical attenuation
ramp, with an optional bright blob inside the chamber that mimics a
papillary muscle.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from .geometry import rasterize


class PhantomError(ValueError):
    pass


@dataclass
class PhantomSpec:
    width: int = 256
    height: int = 256
    # horizontal semi-axis of the inner (endocardial) ellipse, px
    inner_radius: tuple[float, float] = (38.0, 46.0)
    # vertical / horizontal semi-axis ratio of the inner ellipse
    aspect: tuple[float, float] = (1.35, 1.55)
    thickness: tuple[float, float] = (12.0, 18.0)
    # angular gap at the base of the horseshoe, degrees
    opening_angle: tuple[float, float] = (100.0, 120.0)
    center_jitter: float = 5.0
    myocardium_mean: float = 0.65
    background_mean: float = 0.35
    chamber_mean: float = 0.15
    noise: float = 0.9
    # Gaussian correlation length of the speckle field, px (0: independent pixels)
    speckle_size: float = 2.5
    attenuation: float = 0.7
    distractor: bool = True
    distractor_radius: tuple[float, float] = (6.0, 10.0)
    n_landmarks: int = 76
    seed: int = 0

    def validate(self):
        for name in ("inner_radius", "aspect", "thickness", "opening_angle", "distractor_radius"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise PhantomError(f"{name} range must be positive and ordered, got {(lo, hi)}")
        if self.thickness[1] > self.inner_radius[0]:
            raise PhantomError("thickness range exceeds the inner radius range")
        if self.opening_angle[1] >= 360:
            raise PhantomError("opening angle must be below 360 degrees")
        if self.n_landmarks < 8 or self.n_landmarks % 4:
            raise PhantomError("n_landmarks must be >= 8 and a multiple of 4")
        if self.width < 8 or self.height < 8:
            raise PhantomError("image too small")
        if not 0 <= self.noise < 1 or not 0 <= self.attenuation < 1:
            raise PhantomError("noise and attenuation must lie in [0, 1)")
        if self.speckle_size < 0:
            raise PhantomError("speckle_size must be nonnegative")
        outer_x = self.inner_radius[1] + self.thickness[1] + self.center_jitter
        outer_y = self.inner_radius[1] * self.aspect[1] + self.thickness[1] + self.center_jitter
        if 2 * outer_x >= self.width or 2 * outer_y >= self.height:
            raise PhantomError("geometry ranges do not fit inside the image")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PhantomError(f"unknown phantom spec keys: {sorted(unknown)}")
        vals = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**vals)


@dataclass
class Phantom:
    image: np.ndarray  # float in [0, 1], 8-bit quantised
    mask: np.ndarray  # uint8 {0, 1}
    landmarks: np.ndarray  # (N, 2)
    geometry: dict


def _ellipse(cx, cy, a, b, phi):
    # phi measured from the apex (up), positive towards +x
    return np.column_stack([cx + a * np.sin(phi), cy - b * np.cos(phi)])


def _arc_points(cx, cy, a, b, phi0, phi1, count):
    """``count`` points at equal arc length strictly between the two end angles."""
    dense = np.linspace(phi0, phi1, 4001)
    pts = _ellipse(cx, cy, a, b, dense)
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    targets = arc[-1] * np.arange(1, count + 1) / (count + 1)
    return _ellipse(cx, cy, a, b, np.interp(targets, arc, dense))


def _line_points(p, q, count):
    t = np.arange(1, count + 1)[:, None] / (count + 1)
    return p + t * (q - p)


def horseshoe_landmarks(cx, cy, a, aspect, thickness, opening_deg, n_landmarks=76) -> np.ndarray:
    """Landmarks of one ring sector.

    Four key points (sector corners) with ``(N - 4) / 4`` equally spaced points
    between each consecutive pair, starting at the inner-left corner and
    running along the inner arc over the apex.
    """
    per = (n_landmarks - 4) // 4
    half = math.radians(360.0 - opening_deg) / 2
    b = a * aspect
    ao, bo = a + thickness, b + thickness
    k1 = _ellipse(cx, cy, a, b, -half)[0]
    k2 = _ellipse(cx, cy, a, b, half)[0]
    k3 = _ellipse(cx, cy, ao, bo, half)[0]
    k4 = _ellipse(cx, cy, ao, bo, -half)[0]
    parts = [
        k1[None], _arc_points(cx, cy, a, b, -half, half, per),
        k2[None], _line_points(k2, k3, per),
        k3[None], _arc_points(cx, cy, ao, bo, half, -half, per),
        k4[None], _line_points(k4, k1, per),
    ]
    return np.vstack(parts)


def _sample_geometry(spec: PhantomSpec, rng) -> dict:
    return {
        "cx": spec.width / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter),
        "cy": spec.height / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter),
        "a": rng.uniform(*spec.inner_radius),
        "aspect": rng.uniform(*spec.aspect),
        "thickness": rng.uniform(*spec.thickness),
        "opening": rng.uniform(*spec.opening_angle),
    }


def speckle(shape, size: float, rng) -> np.ndarray:
    """Zero-mean field in [-1, 1]; uniform white noise, optionally blurred and rescaled."""
    u = rng.uniform(-1.0, 1.0, size=shape)
    if size <= 0:
        return u
    u = ndimage.gaussian_filter(u, size, mode="wrap")
    # restore the spread of the unblurred field (std 1/sqrt(3))
    return np.clip(u * (1.0 / math.sqrt(3.0)) / u.std(), -1.0, 1.0)


def render(spec: PhantomSpec, geom: dict, rng) -> Phantom:
    lm = horseshoe_landmarks(geom["cx"], geom["cy"], geom["a"], geom["aspect"], geom["thickness"],
                             geom["opening"], spec.n_landmarks)
    mask = rasterize(lm, spec.width, spec.height)
    yy, xx = np.mgrid[0:spec.height, 0:spec.width] + 0.5
    a, b = geom["a"], geom["a"] * geom["aspect"]
    chamber = (((xx - geom["cx"]) / a) ** 2 + ((yy - geom["cy"]) / b) ** 2 < 1.0) & (mask == 0)
    img = np.full(mask.shape, spec.background_mean)
    img[chamber] = spec.chamber_mean
    img[mask == 1] = spec.myocardium_mean
    if spec.distractor:
        # blob hugging the lateral inner wall, inside the chamber
        r = rng.uniform(*spec.distractor_radius)
        side = rng.choice([-1.0, 1.0])
        phi = side * math.radians(rng.uniform(70.0, 110.0))
        wall = _ellipse(geom["cx"], geom["cy"], a, b, phi)[0]
        toward = np.array([geom["cx"], geom["cy"]]) - wall
        c = wall + toward / np.linalg.norm(toward) * (0.8 * r)
        blob = ((xx - c[0]) ** 2 + (yy - c[1]) ** 2 < r * r) & (mask == 0)
        img[blob] = spec.myocardium_mean
        geom = dict(geom, distractor=[float(c[0]), float(c[1]), float(r)])
    if spec.noise > 0:
        img = img * (1.0 + spec.noise * speckle(img.shape, spec.speckle_size, rng))
    if spec.attenuation > 0:
        img = img * (1.0 - spec.attenuation * yy / spec.height)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return Phantom(img, mask, lm, geom)


def generate_dataset(spec: PhantomSpec, count: int) -> list[Phantom]:
    """``count`` phantoms, each from its own stream derived from ``spec.seed``."""
    if count < 1:
        raise PhantomError("count must be >= 1")
    spec.validate()
    out = []
    for child in np.random.SeedSequence(spec.seed).spawn(count):
        rng = np.random.default_rng(child)
        out.append(render(spec, _sample_geometry(spec, rng), rng))
    return out
