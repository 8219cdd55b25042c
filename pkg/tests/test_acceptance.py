"""Acceptance suite: one verdict line per criterion, printed in the summary.

The leave-one-out comparison (criteria 6 and 7) takes about half an hour on
one core. Set ``SMRF_SKIP_SLOW=1`` to skip it.
"""
import math
import os
import time

import numpy as np
import pytest

import oracles
from recovery import clean_model, recovery_trial
from smrf.cli import main
from smrf.config import RunConfig
from smrf.experiment import Item, loocv, makespan
from smrf.features import FeatureConfig, FeatureContext, sm_polygon, split_test
from smrf.forest import ForestConfig, TrainingData, loads_forest, predict_map, train_forest
from smrf.geometry import point_in_polygon, rasterize, resample_closed, signed_distance
from smrf.metrics import boundary_distance, mask_metrics
from smrf.shape_model import build_model, sample_params, synthesize
from smrf.synth import PhantomSpec, generate_dataset

SEED = 0  # master seed of the published comparison run
DEPTHS = (8, 12, 16, 20, 24)
LIMIT_S = 30 * 60


def cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def test_criterion_1_geometry_oracle(record):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        poly = oracles.star_polygon(rng, int(rng.integers(3, 16)), rmin=1, rmax=8)
        for p in rng.uniform(-10, 10, size=(5, 2)):
            worst = max(worst, abs(signed_distance(p, poly) - oracles.signed_distance(p, poly)))
    mismatches = 0
    for _ in range(40):
        poly = oracles.star_polygon(rng, int(rng.integers(3, 16)), cx=12, cy=11, rmin=2, rmax=11)
        mask = rasterize(poly, 24, 22).astype(bool)
        brute = np.array([[point_in_polygon((c + 0.5, r + 0.5), poly) for c in range(24)]
                          for r in range(22)])
        mismatches += int(np.count_nonzero(mask != brute))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and mismatches == 0 and elapsed < 10
    record(1, ok, f"1000 cases max |diff| {worst:.1e}; raster mismatches {mismatches}; "
                  f"{elapsed:.1f} s")
    assert ok


def test_criterion_2_pca(record):
    toy = build_model([(0, 0, 1, 0, 1, 1), (2, 2, 3, 2, 3, 3)], 0.98)
    direction = abs(float(toy.eigvecs[:, 0] @ (np.ones(6) / math.sqrt(6))))
    toy_ok = (np.abs(toy.mean - [1, 1, 2, 1, 2, 2]).max() <= 1e-9 and toy.n_modes == 1
              and abs(toy.eigvals[0] - 12.0) <= 1e-9 and abs(direction - 1) <= 1e-9)
    rng = np.random.default_rng(2)
    base = np.array([p.landmarks.ravel() for p in generate_dataset(PhantomSpec(seed=2), 20)])
    shapes = base + rng.normal(scale=2.0, size=base.shape)
    full = build_model(shapes, 1.0)
    recon = max(np.abs(synthesize(full, full.project(x)) - x).max() for x in shapes)
    proj = (shapes - full.mean) @ full.eigvecs
    var_err = float(np.abs(proj.var(axis=0, ddof=1) - full.eigvals).max())
    ok = toy_ok and recon <= 1e-6 and var_err <= 1e-6
    record(2, ok, f"toy lambda1 {toy.eigvals[0]:.12g} K={toy.n_modes}; reconstruction "
                  f"{recon:.1e}; variance error {var_err:.1e}")
    assert ok


def test_criterion_3_eq1_eq2(record):
    model = build_model([p.landmarks for p in generate_dataset(PhantomSpec(seed=3), 15)], 0.98)
    mean_ok = np.array_equal(synthesize(model, np.zeros(model.n_modes)), model.mean)
    rng = np.random.default_rng(3)
    worst = 0.0
    split_ok = True
    for i in range(100):
        b = sample_params(model, 1.0, rng)
        dmap = FeatureContext(np.zeros((256, 256)), model).sm_map(b)
        poly = sm_polygon(model, b)
        if i < 20:
            cols, rows = np.floor(resample_closed(poly, spacing=0.05)).astype(int).T
            worst = max(worst, float(np.abs(dmap[rows, cols]).max()))
        split_ok &= np.array_equal(split_test(dmap, 0.0), rasterize(poly, 256, 256).astype(bool))
    ok = mean_ok and worst <= 0.75 and split_ok
    record(3, ok, f"b=0 is mean: {mean_ok}; max |SM| on boundary pixels {worst:.3f} px; "
                  f"tau=0 split equals inside for 100 draws: {split_ok}")
    assert ok


def test_criterion_4_forest(record):
    fc = FeatureConfig(appearance_radius=6, box_max=5)
    images, masks = oracles.separable_toy()
    data = TrainingData(images, masks, fc)
    pos = train_forest(data, ForestConfig(n_trees=5, max_depth=8, candidates=20), [0, 1, 0], 1)
    test_img = np.random.default_rng(9).random((32, 32))
    acc = mask_metrics(predict_map(pos, test_img) >= 0.5, masks[0])[0]

    mixed = train_forest(data, ForestConfig(n_trees=4, max_depth=10, candidates=20),
                         [0.5, 0.5, 0], 2)
    ctx = FeatureContext(test_img, config=fc)
    pm = predict_map(mixed, test_img, ctx=ctx)
    rng = np.random.default_rng(4)
    mean_ok = True
    for x, y in rng.integers(0, 32, size=(100, 2)):
        vals = [oracles.walk_tree(t, x, y, ctx, mixed.sm_shapes) for t in mixed.trees]
        mean_ok &= pm[y, x] == sum(vals) / len(vals)
    back = loads_forest(mixed.dumps())
    trip_ok = all(np.array_equal(predict_map(back, im), predict_map(mixed, im))
                  for im in (test_img, images[0]))
    ok = acc >= 0.99 and mean_ok and trip_ok
    record(4, ok, f"separable accuracy {acc:.4f}; per-tree mean exact: {mean_ok}; "
                  f"round trip exact: {trip_ok}")
    assert ok


def test_criterion_5_recovery(record):
    model = clean_model()
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    trials = [recovery_trial(model, rng) for _ in range(20)]
    elapsed = time.perf_counter() - t0
    dice = min(t["dice"] for t in trials)
    ratio = max(t["objective_ratio"] for t in trials)
    mono = all(t["monotone"] for t in trials)
    ok = dice >= 0.98 and ratio <= 0.01 and mono and elapsed < 60
    record(5, ok, f"20 fits: min Dice {dice:.4f}; max objective {100 * ratio:.3f}% of sum I^2; "
                  f"traces non-increasing: {mono}; {elapsed:.1f} s")
    assert ok


@pytest.fixture(scope="module")
def comparison():
    if os.environ.get("SMRF_SKIP_SLOW"):
        pytest.skip("SMRF_SKIP_SLOW set")
    phantoms = generate_dataset(PhantomSpec(seed=SEED), 15)
    items = [Item(p.image, p.mask, p.landmarks) for p in phantoms]
    config = RunConfig(seed=SEED, workers=cores())
    t0 = time.perf_counter()
    result = loocv(items, config, DEPTHS)
    return result, time.perf_counter() - t0, config.workers


@pytest.mark.slow
def test_criterion_6_loocv_ordering(comparison, record):
    result, wall, workers = comparison
    dice = {m: result.summary(m)["dice"][0] for m in result.methods()}
    hd = {m: result.summary(m)["hd_px"][0] for m in result.methods()}
    quality = (dice["smrf"] >= dice["classic"] + 0.02 and hd["smrf"] <= hd["position"]
               and dice["smrf"] >= 0.85)
    folds = [r.seconds for r in result.folds]
    overhead = max(0.0, wall - sum(folds) / workers)
    est4 = makespan(folds, 4) + overhead
    if workers >= 4:
        fast, timing = wall < LIMIT_S, f"wall {wall / 60:.1f} min on {workers} workers"
    else:
        fast = wall < LIMIT_S or est4 < LIMIT_S
        timing = (f"wall {wall / 60:.1f} min on {workers} core(s); 4-worker schedule of the "
                  f"measured fold times {est4 / 60:.1f} min")
    ok = quality and fast
    record(6, ok, f"Dice smrf {dice['smrf']:.4f} classic {dice['classic']:.4f} position "
                  f"{dice['position']:.4f}; HD smrf {hd['smrf']:.2f} position "
                  f"{hd['position']:.2f} px; {timing}")
    assert ok


@pytest.mark.slow
def test_criterion_7_depth_trend(comparison, record):
    result = comparison[0]
    jac = {(d, m): j for d, m, j in result.depth_means()}
    beats_classic = all(jac[(d, "smrf")] >= jac[(d, "classic")] for d in DEPTHS)
    margin = jac[(8, "smrf")] - jac[(8, "position")]
    ok = beats_classic and margin >= 0.02
    table = " ".join(f"d{d}:{jac[(d, 'smrf')]:.3f}/{jac[(d, 'classic')]:.3f}/"
                     f"{jac[(d, 'position')]:.3f}" for d in DEPTHS)
    record(7, ok, f"Jaccard sm/classic/position {table}; depth-8 margin over position "
                  f"{margin:+.4f}")
    assert ok


def test_criterion_8_metric_identities(record):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        a = rng.random((40, 40)) < rng.random()
        b = rng.random((40, 40)) < rng.random()
        _, dice, jac = mask_metrics(a, b)
        worst = max(worst, abs(jac - dice / (2 - dice)))
    order_ok = True
    for _ in range(100):
        pa = rng.normal(size=(int(rng.integers(1, 80)), 2)) * 10
        pb = rng.normal(size=(int(rng.integers(1, 80)), 2)) * 10 + rng.normal(size=2) * 5
        mad, hd = boundary_distance(pa, pb)
        order_ok &= hd >= mad
    t = np.linspace(0, 2 * math.pi, 4000, endpoint=False)
    circle = np.column_stack([80 + 30 * np.cos(t), 80 + 30 * np.sin(t)])
    _, hd = boundary_distance(circle, circle + (3.0, 4.0))
    ok = worst <= 1e-12 and order_ok and abs(hd - 5.0) <= 0.1
    record(8, ok, f"max |J - D/(2-D)| {worst:.1e}; HD >= MAD on 100 pairs: {order_ok}; "
                  f"shifted circle HD {hd:.4f} (shift 5)")
    assert ok


def test_criterion_9_determinism(small_dataset, tiny_config, tmp_path, record):
    outs = []
    for name in ("a.csv", "b.csv"):
        code = main(["loocv", "--dataset", str(small_dataset), "--config", str(tiny_config),
                     "--seed", "17", "--quiet", "--out", str(tmp_path / name)])
        assert code == 0
        outs.append((tmp_path / name).read_bytes())
    ok = outs[0] == outs[1]
    record(9, ok, f"two loocv runs, {len(outs[0])} bytes each, identical: {ok}")
    assert ok
