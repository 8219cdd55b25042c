"""PCA point-distribution model over 2D landmark sets.

Landmark sets are flat vectors ``(x1, y1, ..., xN, yN)`` in image
coordinates. No alignment is applied before PCA: generated shapes live in
absolute pixel coordinates, and pose is handled by the fitting stage.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_BOUND_S = 3.0
EIGEN_DISCARD = 1e-10


class ShapeModelError(ValueError):
    pass


def as_landmarks(coords) -> np.ndarray:
    """Flatten ``(N, 2)`` or ``(2N,)`` input into a validated ``(2N,)`` vector."""
    x = np.asarray(coords, dtype=np.float64).reshape(-1)
    if x.size % 2 or x.size < 6:
        raise ShapeModelError(f"landmark vector must have even length >= 6, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ShapeModelError("landmarks must be finite")
    return x


def to_points(coords) -> np.ndarray:
    return np.asarray(coords, dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True)
class ShapeModel:
    mean: np.ndarray
    eigvecs: np.ndarray  # (2N, K), orthonormal columns
    eigvals: np.ndarray  # (K,), descending
    degenerate: bool = False
    variance_fractions: np.ndarray = field(default=None, compare=False, repr=False)

    @property
    def n_landmarks(self) -> int:
        return self.mean.size // 2

    @property
    def n_modes(self) -> int:
        return self.eigvals.size

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.eigvals)

    def mean_points(self) -> np.ndarray:
        return to_points(self.mean)

    def synthesize(self, b) -> np.ndarray:
        return synthesize(self, b)

    def project(self, coords) -> np.ndarray:
        """Least-squares mode weights of a landmark vector."""
        x = as_landmarks(coords)
        if x.size != self.mean.size:
            raise ShapeModelError("landmark count does not match model")
        return self.eigvecs.T @ (x - self.mean)

    def to_dict(self) -> dict:
        return {
            "n_landmarks": self.n_landmarks,
            "mean": self.mean.tolist(),
            "eigvals": self.eigvals.tolist(),
            "eigvecs": self.eigvecs.T.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeModel":
        try:
            n = int(d["n_landmarks"])
            mean = np.asarray(d["mean"], dtype=np.float64)
            eigvals = np.asarray(d["eigvals"], dtype=np.float64).reshape(-1)
            rows = np.asarray(d["eigvecs"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ShapeModelError(f"malformed model: {exc}") from exc
        k = eigvals.size
        eigvecs = rows.reshape(k, 2 * n).T if k else np.zeros((2 * n, 0))
        if mean.shape != (2 * n,):
            raise ShapeModelError("mean length does not match n_landmarks")
        return cls(mean=mean, eigvecs=np.ascontiguousarray(eigvecs), eigvals=eigvals,
                   degenerate=(k == 0))

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "ShapeModel":
        return cls.from_dict(json.loads(text))


def build_model(shapes, variance_target: float = 0.98) -> ShapeModel:
    """Fit a PCA shape model to a sequence of landmark vectors.

    Eigen-pairs come from the sample covariance (divisor ``M - 1``); modes with
    eigenvalue ``<= 1e-10 * lambda_1`` are dropped, then the smallest ``K``
    reaching ``variance_target`` of the remaining variance is kept.
    """
    if not 0 < variance_target <= 1:
        raise ShapeModelError("variance_target must lie in (0, 1]")
    data = [as_landmarks(s) for s in shapes]
    if len(data) < 2:
        raise ShapeModelError(f"need at least 2 shapes, got {len(data)}")
    if len({d.size for d in data}) != 1:
        raise ShapeModelError("all shapes must have the same landmark count")
    X = np.vstack(data)
    m, dim = X.shape
    mean = X.mean(axis=0)
    centered = X - mean
    _, sing, vt = np.linalg.svd(centered, full_matrices=False)
    eigvals = sing**2 / (m - 1)
    if eigvals.size == 0 or eigvals[0] <= 0:
        return ShapeModel(mean=mean, eigvecs=np.zeros((dim, 0)), eigvals=np.zeros(0),
                          degenerate=True, variance_fractions=np.zeros(0))
    keep = eigvals > EIGEN_DISCARD * eigvals[0]
    eigvals, vt = eigvals[keep], vt[keep]
    fractions = eigvals / eigvals.sum()
    cum = np.cumsum(fractions)
    if variance_target >= 1.0:
        k = eigvals.size  # every non-null mode; cum may fall short of 1 by round-off
    else:
        k = min(int(np.searchsorted(cum, variance_target) + 1), eigvals.size)
    vecs = vt[:k].T.copy()
    # deterministic sign: largest-magnitude component of each mode positive
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(k)])
    signs[signs == 0] = 1.0
    vecs *= signs
    return ShapeModel(mean=mean, eigvecs=vecs, eigvals=eigvals[:k].copy(),
                      variance_fractions=fractions)


def synthesize(model: ShapeModel, b) -> np.ndarray:
    """Landmark vector ``mean + P b``."""
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if b.size != model.n_modes:
        raise ShapeModelError(f"expected {model.n_modes} shape parameters, got {b.size}")
    return model.mean + model.eigvecs @ b


def clamp_params(b, model: ShapeModel, s: float = DEFAULT_BOUND_S) -> np.ndarray:
    """Clip each ``b_i`` into ``[-s sqrt(lambda_i), s sqrt(lambda_i)]``."""
    if s <= 0:
        raise ShapeModelError("bound multiplier must be positive")
    lim = s * model.sd
    return np.clip(np.asarray(b, dtype=np.float64), -lim, lim)


def sample_params(model: ShapeModel, s: float, rng: np.random.Generator) -> np.ndarray:
    """Independent ``b_i ~ U(-s sqrt(lambda_i), s sqrt(lambda_i))``."""
    if s <= 0:
        raise ShapeModelError("bound multiplier must be positive")
    lim = s * model.sd
    return rng.uniform(-lim, lim)
