"""Fit the shape model to a probability map by compass search.

The objective is the sum of squared differences between the probability map
and the binary mask of the posed model shape, plus an L1 penalty on the mode
weights measured in standard deviations::

    sum((prob - mask(T(mean + P b)))**2) + alpha / K * sum(|b_i| / sqrt(lambda_i))

Mode weights are box-constrained to ``|b_i| <= s_fit * sqrt(lambda_i)``.

The binary mask makes the data term piecewise constant with kinks wherever
parts of the two boundaries already coincide, and coordinate search stalls on
those kinks. The default search therefore runs in stages: compass search on
the same objective with the exact pixel-coverage (antialiased) mask, which is
piecewise smooth, followed by a compass polish on the exact objective. Search
directions are decorrelated through the landmark Jacobian, because an
unaligned shape model has modes that partly duplicate the pose parameters.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import PoseParams, apply_pose, centroid, coverage, rasterize
from .shape_model import ShapeModel, synthesize


@dataclass
class FitConfig:
    alpha: float | None = None  # None: 0.1 * sum of the probability map
    s_fit: float = 2.0
    max_evals: int = 20000
    step_b: float = 0.5  # in units of sqrt(lambda_i)
    step_translation: float = 4.0  # px
    step_rotation: float = 0.05  # rad
    step_scale: float = 1.05  # multiplicative
    shrink: float = 0.5
    tolerance: float = 1e-3
    multi_start: bool = False
    n_starts: int = 5
    start_jitter: float = 10.0  # px
    # "staged": coverage stages then exact polish; "compass": exact objective only
    strategy: str = "staged"
    # "decorrelated" or "coordinate" poll directions
    basis: str = "decorrelated"
    step_displacement: float = 4.0  # initial RMS landmark move per step, px
    coarse_tolerance: float = 1e-2
    refine_step: float = 0.5
    polish_step: float = 0.25
    direction_cap: float = 2.0  # max direction length in units of the coordinate steps

    def validate(self):
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if self.tolerance <= 0 or self.s_fit <= 0 or self.max_evals < 1:
            raise ValueError("tolerance, s_fit and max_evals must be positive")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.step_scale <= 1:
            raise ValueError("step_scale must exceed 1")
        if self.strategy not in ("staged", "compass"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.basis not in ("decorrelated", "coordinate"):
            raise ValueError(f"unknown basis {self.basis!r}")


@dataclass
class FitResult:
    b: np.ndarray
    pose: PoseParams
    objective: float
    evals: int
    converged: bool
    boundary: np.ndarray
    alpha: float = 0.0
    # (eval_index, objective, *b, tx, ty, rot, scale, stage); objectives are
    # non-increasing within each stage
    trace: list = field(default_factory=list, repr=False)

    def mask(self, width: int, height: int) -> np.ndarray:
        return rasterize(self.boundary, width, height)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = len(self.b)
        w.writerow(["eval_index", "objective", *[f"b{i}" for i in range(k)],
                    "tx", "ty", "rot", "scale", "stage"])
        for row in self.trace:
            w.writerow([row[0], repr(row[1]), *[repr(float(v)) for v in row[2:-1]], row[-1]])
        return buf.getvalue()


def default_alpha(prob_map) -> float:
    """0.1 x pixel count x mean map value, i.e. tied to the data-term scale."""
    return 0.1 * float(np.sum(prob_map))


def pose_center(model: ShapeModel) -> np.ndarray:
    return centroid(model.mean_points())


def initial_pose(model: ShapeModel, width: int, height: int) -> PoseParams:
    """Unrotated, unscaled pose moving the mean-shape centroid to the image center."""
    c = pose_center(model)
    return PoseParams(width / 2 - c[0], height / 2 - c[1], 0.0, 1.0)


def model_polygon(model: ShapeModel, b, pose: PoseParams) -> np.ndarray:
    return apply_pose(synthesize(model, b).reshape(-1, 2), pose, pose_center(model))


def regularizer(b, model: ShapeModel, alpha: float) -> float:
    if model.n_modes == 0:
        return 0.0
    return alpha / model.n_modes * float(np.sum(np.abs(b) / model.sd))


def objective(b, pose: PoseParams, prob_map, model: ShapeModel, alpha: float) -> float:
    """Data term plus weighted mode penalty for one parameter set."""
    prob = np.asarray(prob_map, dtype=np.float64)
    h, w = prob.shape
    mask = rasterize(model_polygon(model, b, pose), w, h)
    return float(np.sum((prob - mask) ** 2)) + regularizer(np.asarray(b, dtype=np.float64), model,
                                                            alpha)


def result_boundary(fit: FitResult, model: ShapeModel) -> np.ndarray:
    return model_polygon(model, fit.b, fit.pose)


class _Problem:
    """Objective over the scaled search vector ``[b / sd, tx, ty, rot, log s]``."""

    def __init__(self, prob, model: ShapeModel, alpha: float, s_fit: float):
        self.prob = prob
        self.model = model
        self.alpha = alpha
        self.s_fit = s_fit
        self.k = model.n_modes
        self.evals = 0
        self.smooth = False

    def unpack(self, z):
        b = z[:self.k] * self.model.sd
        pose = PoseParams(z[self.k], z[self.k + 1], z[self.k + 2], math.exp(z[self.k + 3]))
        return b, pose

    def clamp(self, z):
        z = z.copy()
        z[:self.k] = np.clip(z[:self.k], -self.s_fit, self.s_fit)
        return z

    def landmarks(self, z) -> np.ndarray:
        b, pose = self.unpack(z)
        return model_polygon(self.model, b, pose).ravel()

    def __call__(self, z) -> float:
        self.evals += 1
        b, pose = self.unpack(z)
        if not self.smooth:
            return objective(b, pose, self.prob, self.model, self.alpha)
        h, w = self.prob.shape
        cov = coverage(model_polygon(self.model, b, pose), w, h)
        return float(np.sum((self.prob - cov) ** 2)) + regularizer(b, self.model, self.alpha)


def _decorrelated_basis(problem: _Problem, z, coord_steps, cap: float) -> np.ndarray:
    """Columns are search directions, each moving the landmarks by ~1 px RMS.

    Directions are right singular vectors of the landmark Jacobian taken in
    coordinate-step units; near-null directions are capped at ``cap`` steps.
    """
    n = z.size
    h = 1e-4
    jac = np.empty((problem.model.mean.size, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        jac[:, i] = (problem.landmarks(z + e) - problem.landmarks(z - e)) / (2 * h)
    jac *= coord_steps
    _, sing, vt = np.linalg.svd(jac, full_matrices=False)
    rms = math.sqrt(jac.shape[0] / 2)
    with np.errstate(divide="ignore"):
        length = np.minimum(rms / sing, cap)
    return vt.T * length * coord_steps[:, None]


def _compass(problem: _Problem, z0, steps, config: FitConfig, budget: int, directions=None,
             tolerance=None, rebasis=None, pattern=False):
    """Greedy compass search along the columns of ``directions`` (default: axes).

    ``steps`` holds one step length per direction; all shrink together.
    ``rebasis(z)`` replaces the directions after each shrink. With ``pattern``
    an accepted move is repeated with doubling length while it keeps improving,
    which walks long curved valleys in far fewer polls.
    """
    tolerance = config.tolerance if tolerance is None else tolerance
    z = problem.clamp(np.asarray(z0, dtype=np.float64))
    start_evals = problem.evals
    f = problem(z)
    accepted = [(problem.evals, f, z.copy())]
    steps = np.asarray(steps, dtype=np.float64).copy()
    if directions is None:
        directions = np.eye(z.size)
    n = directions.shape[1]
    while problem.evals - start_evals < budget and steps.max() >= tolerance:
        best_f, best_z, best_move = f, None, None
        for i in range(n):
            for sign in (1.0, -1.0):
                move = sign * steps[i] * directions[:, i]
                trial = problem.clamp(z + move)
                if np.array_equal(trial, z):
                    continue
                ft = problem(trial)
                if ft < best_f:
                    best_f, best_z, best_move = ft, trial, move
                if problem.evals - start_evals >= budget:
                    break
            if problem.evals - start_evals >= budget:
                break
        if best_z is not None:
            z, f = best_z, best_f
            accepted.append((problem.evals, f, z.copy()))
            while pattern and problem.evals - start_evals < budget:
                best_move = 2.0 * best_move
                trial = problem.clamp(z + best_move)
                if np.array_equal(trial, z):
                    break
                ft = problem(trial)
                if ft >= f:
                    break
                z, f = trial, ft
                accepted.append((problem.evals, f, z.copy()))
        else:
            steps *= config.shrink
            if rebasis is not None:
                directions = rebasis(z)
    converged = bool(steps.max() < tolerance)
    return z, f, converged, accepted


def fit(prob_map, model: ShapeModel, config: FitConfig | None = None) -> FitResult:
    """Minimise the fitting objective from the centered mean shape.

    Returns the best parameters, the posed boundary polygon and the trace of
    accepted objective values (non-increasing within each search stage).
    """
    config = config or FitConfig()
    config.validate()
    prob = np.asarray(prob_map, dtype=np.float64)
    h, w = prob.shape
    alpha = default_alpha(prob) if config.alpha is None else float(config.alpha)
    k = model.n_modes
    pose0 = initial_pose(model, w, h)
    z0 = np.concatenate([np.zeros(k), [pose0.tx, pose0.ty, 0.0, 0.0]])
    problem = _Problem(prob, model, alpha, config.s_fit)

    def package(z, f, converged, stages):
        b, pose = problem.unpack(z)
        trace = []
        for stage, accepted in stages:
            for ev, fv, zz in accepted:
                bb, pp = problem.unpack(zz)
                trace.append((ev, fv, *bb, pp.tx, pp.ty, pp.rotation, pp.scale, stage))
        return FitResult(b, pose, float(f), problem.evals, converged,
                         model_polygon(model, b, pose), alpha, trace)

    if not np.any(prob > 0):
        f0 = problem(z0)
        return package(z0, f0, False, [("exact", [(problem.evals, f0, z0)])])

    coord_steps = np.concatenate([np.full(k, config.step_b),
                                  [config.step_translation, config.step_translation,
                                   config.step_rotation, math.log(config.step_scale)]])
    starts = [z0]
    if config.multi_start:
        j = config.start_jitter
        offsets = [(j, 0), (-j, 0), (0, j), (0, -j), (j, j), (-j, -j), (j, -j), (-j, j)]
        for dx, dy in offsets[:max(0, config.n_starts - 1)]:
            z = z0.copy()
            z[k] += dx
            z[k + 1] += dy
            starts.append(z)
    best = None
    for z_start in starts:
        if config.max_evals - problem.evals <= 0:
            break
        run = _search(problem, z_start, coord_steps, config)
        if best is None or run[1] < best[1]:
            best = run
    return package(*best)


def _search(problem: _Problem, z, coord_steps, config: FitConfig):
    """One search from ``z``; returns ``(z, f, converged, [(stage, accepted), ...])``."""
    n = z.size
    stages = []

    def budget():
        return config.max_evals - problem.evals

    def directions(at, length):
        # step lengths are RMS landmark moves; coordinate steps scale alike
        if config.basis == "coordinate":
            return None, coord_steps * (length / config.step_displacement)
        d = _decorrelated_basis(problem, at, coord_steps, config.direction_cap)
        return d, np.full(n, length)

    if config.strategy == "staged":
        # the valley bends, so the basis follows the current point
        opts = {"pattern": True}
        if config.basis != "coordinate":
            opts["rebasis"] = lambda at: directions(at, 1.0)[0]
        z_init, f_init = z.copy(), problem(problem.clamp(z))
        problem.smooth = True
        d, steps = directions(z, config.step_displacement)
        z, _, _, acc = _compass(problem, z, steps, config, budget(), d, config.coarse_tolerance,
                                **opts)
        stages.append(("coarse", acc))
        d, steps = directions(z, config.refine_step)
        if budget() > 0:
            z, _, _, acc = _compass(problem, z, steps, config, budget(), d, **opts)
            stages.append(("smooth", acc))
        problem.smooth = False
        # polish from whichever point is better on the exact objective
        f = problem(z)
        if f_init < f:
            z, f = z_init, f_init
        steps = steps * (config.polish_step / config.refine_step)
        if budget() <= 0:
            stages.append(("exact", [(problem.evals, f, z.copy())]))
            return z, f, False, stages
    else:
        opts = {}
        d, steps = directions(z, config.step_displacement)
    z, f, converged, acc = _compass(problem, z, steps, config, budget(), d, **opts)
    stages.append(("exact", acc))
    return z, f, converged, stages
