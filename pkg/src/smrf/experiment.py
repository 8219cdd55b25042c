"""Leave-one-out comparison of the classic, position and SMRF pipelines.

Per fold the held-out image is segmented by each method's forest trained on
the remaining images. Baselines threshold the probability map at 0.5 and
take Canny edges of the map as their boundary; SMRF fits the shape model
(built from the remaining annotations only) to the map.

Depth results come from the same forests: every tree node keeps its class
counts and its own random stream, so evaluating a tree with a depth cap is
identical to training it with that ``max_depth``.
"""
from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .features import FeatureContext, histogram_equalize
from .fitting import fit
from .forest import SMPool, TrainingData, train_forest
from .geometry import rasterize
from .metrics import EmptyBoundaryError, boundary_distance, extract_boundary, mask_metrics, \
    polygon_points
from .shape_model import ShapeModel, build_model

COLUMNS = ("accuracy", "dice", "jaccard", "mad_px", "hd_px")


class ExperimentError(RuntimeError):
    pass


@dataclass
class Item:
    image: np.ndarray
    mask: np.ndarray
    landmarks: np.ndarray


@dataclass
class FoldRecord:
    fold: int
    model_items: list  # dataset indices whose annotations built the shape model
    n_modes: int
    seconds: float = 0.0  # wall time of the fold; not part of any report


@dataclass
class LoocvResult:
    rows: list = field(default_factory=list)  # (method, fold, accuracy, dice, jaccard, mad, hd)
    depth_rows: list = field(default_factory=list)  # (fold, method, depth, jaccard)
    folds: list = field(default_factory=list)
    pixel_spacing_mm: float | None = None

    def values(self, method: str, column: str) -> np.ndarray:
        j = 2 + COLUMNS.index(column)
        return np.array([r[j] for r in self.rows if r[0] == method], dtype=np.float64)

    def summary(self, method: str) -> dict:
        out = {}
        for c in COLUMNS:
            v = self.values(method, c)
            v = v[np.isfinite(v)]
            mean = float(v.mean()) if v.size else math.nan
            sd = float(v.std(ddof=1)) if v.size > 1 else 0.0 if v.size else math.nan
            out[c] = (mean, sd)
        return out

    def methods(self) -> list:
        return list(dict.fromkeys(r[0] for r in self.rows))

    def depth_means(self) -> list:
        """``(depth, method, mean jaccard)`` sorted by depth then method order."""
        order = {m: i for i, m in enumerate(self.methods())}
        groups = {}
        for _, method, depth, jac in self.depth_rows:
            groups.setdefault((depth, method), []).append(jac)
        keys = sorted(groups, key=lambda k: (k[0], order.get(k[1], 99)))
        return [(d, m, float(np.mean(groups[(d, m)]))) for d, m in keys]

    def to_csv(self) -> str:
        mm = self.pixel_spacing_mm
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["method", "fold", *COLUMNS]
        if mm is not None:
            header += ["mad_mm", "hd_mm"]
        w.writerow(header)
        for method, fold, *vals in self.rows:
            row = [method, fold, *(_fmt(v) for v in vals)]
            if mm is not None:
                row += [_fmt(vals[3] * mm), _fmt(vals[4] * mm)]
            w.writerow(row)
        for method in self.methods():
            s = self.summary(method)
            row = [method, "mean±sd", *(f"{_fmt(s[c][0])}±{_fmt(s[c][1])}" for c in COLUMNS)]
            if mm is not None:
                row += [f"{_fmt(s[c][0] * mm)}±{_fmt(s[c][1] * mm)}" for c in ("mad_px", "hd_px")]
            w.writerow(row)
        return buf.getvalue()

    def depth_table(self) -> str:
        lines = ["# depth method jaccard"]
        lines += [f"{d} {m} {_fmt(j)}" for d, m, j in self.depth_means()]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "nan" if not np.isfinite(v) else f"{v:.6f}"


def fold_seed(master: int, fold: int, stream: int) -> int:
    """Independent seed for one (fold, stream) pair of the master seed."""
    ss = np.random.SeedSequence([master, fold, stream])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _evaluate(mask, boundary, truth_mask, truth_boundary):
    acc, dice, jac = mask_metrics(mask, truth_mask)
    try:
        mad, hd = boundary_distance(boundary(), truth_boundary)
    except EmptyBoundaryError:
        mad = hd = math.nan
    return acc, dice, jac, mad, hd


def _fold_model(shapes, variance_target):
    """PCA model of the training annotations; one annotation gives a mean-only model."""
    if len(shapes) == 1:
        mean = np.asarray(shapes[0], dtype=np.float64).ravel()
        return ShapeModel(mean=mean, eigvecs=np.zeros((mean.size, 0)), eigvals=np.zeros(0),
                          degenerate=True)
    return build_model(shapes, variance_target)


def run_fold(items: list, fold: int, config: RunConfig, depths=(), fit_trace=None):
    """Train, predict and score every configured method on one held-out item."""
    train = [i for i in range(len(items)) if i != fold]
    test = items[fold]
    h, w = test.image.shape
    fc = config.features
    eq = lambda im: histogram_equalize(im, fc.hist_eq_levels)  # noqa: E731

    model = _fold_model([items[i].landmarks for i in train], config.variance_target)
    record = FoldRecord(fold, train, model.n_modes)
    data = TrainingData([eq(items[i].image) for i in train], [items[i].mask for i in train], fc)
    sm_cache = {}
    ctx = FeatureContext(eq(test.image), model, fc, sm_cache)
    truth_boundary = polygon_points(test.landmarks)

    start = time.perf_counter()
    rows, depth_rows = [], []
    for stream, method in enumerate(config.methods):
        weights = fc.weights_for(method)
        pool = None
        if weights[2] > 0:
            rng = np.random.default_rng(fold_seed(config.seed, fold, 100 + stream))
            # a mode-free model has a single shape: the mean
            size = fc.sm_pool_size if model.n_modes else 1
            pool = SMPool.sample(model, size, fc.s_feature, rng, w, h, sm_cache)
        forest = train_forest(data, config.forest, weights, fold_seed(config.seed, fold, stream),
                              pool, method, config.threads)
        maps = forest.depth_maps(ctx, [None, *depths])
        prob = maps[None]
        for d in depths:
            depth_rows.append((fold, method, int(d), mask_metrics(maps[d] >= 0.5, test.mask)[2]))
        if method == "smrf":
            res = fit(prob, model, config.fitting)
            if fit_trace is not None:
                fit_trace[fold] = res
            scores = _evaluate(rasterize(res.boundary, w, h), lambda: polygon_points(res.boundary),
                               test.mask, truth_boundary)
        else:
            scores = _evaluate(prob >= 0.5,
                               lambda: extract_boundary(prob, "canny", config.eval.canny),
                               test.mask, truth_boundary)
        rows.append((method, fold, *scores))
    record.seconds = time.perf_counter() - start
    return rows, depth_rows, record


def _guarded_fold(args):
    items, fold, config, depths = args
    try:
        return run_fold(items, fold, config, depths)
    except Exception as exc:
        raise ExperimentError(f"fold {fold} failed: {exc}") from exc


def loocv(items: list, config: RunConfig | None = None, depths=(), progress=None) -> LoocvResult:
    """Leave-one-out cross-validation over ``items`` (each an :class:`Item`).

    With ``config.workers > 1`` folds run in separate processes; every fold
    draws from its own seeds, so the result does not depend on the worker count.
    """
    config = (config or RunConfig()).validate()
    if len(items) < 2:
        raise ExperimentError("leave-one-out needs at least 2 items")
    shape = items[0].image.shape
    if any(it.image.shape != shape or it.mask.shape != shape for it in items):
        raise ExperimentError("all images and masks must share one size")
    result = LoocvResult(pixel_spacing_mm=config.eval.pixel_spacing_mm)
    jobs = [(items, fold, config, tuple(depths)) for fold in range(len(items))]
    per_fold = {}
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            outcomes = ex.map(_guarded_fold, jobs)
            for fold, (rows, drows, record) in enumerate(outcomes):
                per_fold[fold] = (rows, drows, record)
                if progress is not None:
                    progress(fold, rows)
    else:
        for fold, job in enumerate(jobs):
            per_fold[fold] = _guarded_fold(job)
            if progress is not None:
                progress(fold, per_fold[fold][0])
    for fold in sorted(per_fold):
        result.depth_rows.extend(per_fold[fold][1])
        result.folds.append(per_fold[fold][2])
    # rows grouped by method, folds in order
    for method in config.methods:
        result.rows.extend(r for f in sorted(per_fold) for r in per_fold[f][0] if r[0] == method)
    return result


def makespan(seconds, workers: int) -> float:
    """Wall time of running jobs of the given durations, in order, on ``workers``
    identical workers that each take the next job when free."""
    free = [0.0] * max(1, workers)
    for s in seconds:
        i = free.index(min(free))
        free[i] += s
    return max(free)
