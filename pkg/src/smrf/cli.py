"""Command-line entry point: ``smrf <command> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import METHODS, ConfigError, RunConfig
from .experiment import COLUMNS, ExperimentError, Item, loocv
from .features import FeatureContext, FeatureError, histogram_equalize
from .fitting import fit
from .forest import ForestError, SMPool, TrainingData, loads_forest, predict_map, train_forest
from .geometry import GeometryError, rasterize
from .io import (DataFormatError, encode_pfm, encode_pgm, landmarks_json, read_dataset,
                 read_image, read_landmarks, read_map, read_mask, write_dataset, write_mask)
from .metrics import (EmptyBoundaryError, MetricError, boundary_distance, mask_metrics,
                      polygon_points, threshold_contour)
from .shape_model import ShapeModel, ShapeModelError, build_model
from .synth import PhantomError, PhantomSpec, generate_dataset

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


DATA_ERRORS = (DataFormatError, ShapeModelError, ForestError, GeometryError, PhantomError,
               MetricError, FeatureError, ExperimentError, OSError, json.JSONDecodeError)


def _config(args) -> RunConfig:
    if getattr(args, "config", None):
        try:
            cfg = RunConfig.loads(Path(args.config).read_text())
        except OSError as exc:
            raise DataFormatError(f"cannot read config {args.config}: {exc.strerror}") from exc
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if getattr(args, "pixel_spacing_mm", None) is not None:
        cfg.eval.pixel_spacing_mm = args.pixel_spacing_mm
    return cfg.validate()


def _write(path, data, binary=True):
    p = Path(path)
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True, exist_ok=True)
    if binary:
        p.write_bytes(data)
    else:
        p.write_text(data)


def _load_model(path) -> ShapeModel:
    try:
        return ShapeModel.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"model file {path} is not JSON: {exc}") from exc


def _items(dataset) -> list[Item]:
    _, items = read_dataset(dataset)
    return [Item(img, mask, lm) for img, mask, lm in items]


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    if args.count < 1:
        raise UsageError("count must be >= 1")
    spec = PhantomSpec()
    if args.spec:
        spec = PhantomSpec.from_dict(json.loads(Path(args.spec).read_text()))
    if args.seed is not None:
        spec.seed = args.seed
    spec.validate()
    checksum = write_dataset(args.out, spec, generate_dataset(spec, args.count))
    print(f"wrote {args.count} items to {args.out}")
    print(f"manifest sha256 {checksum}")


def cmd_build_model(args):
    files = []
    for p in map(Path, args.landmarks):
        files.extend(sorted(p.glob("landmarks_*.json")) if p.is_dir() else [p])
    if len(files) < 2:
        raise ShapeModelError(f"need at least 2 landmark files, got {len(files)}")
    model = build_model([read_landmarks(f) for f in files], args.variance_target)
    _write(args.out, model.dumps() + "\n", binary=False)
    fr = model.variance_fractions if model.variance_fractions is not None else np.zeros(0)
    print(f"K={model.n_modes}")
    for i in range(model.n_modes):
        print(f"mode {i}: variance fraction {fr[i]:.6f} cumulative {fr[:i + 1].sum():.6f}")


def cmd_train(args):
    cfg = _config(args)
    if args.method == "smrf" and not args.model:
        raise UsageError("method smrf requires --model")
    weights = cfg.features.weights_for(args.method)
    items = _items(args.dataset)
    fc = cfg.features
    data = TrainingData([histogram_equalize(it.image, fc.hist_eq_levels) for it in items],
                        [it.mask for it in items], fc)
    pool = None
    if weights[2] > 0:
        model = _load_model(args.model)
        if model.n_modes == 0:
            raise ShapeModelError("shape model has no modes")
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        pool = SMPool.sample(model, fc.sm_pool_size, fc.s_feature, rng, data.width, data.height)
    forest = train_forest(data, cfg.forest, weights, cfg.seed, pool, args.method, cfg.threads)
    _write(args.out, forest.dumps())
    print(f"trained {forest.n_trees} trees ({args.method}); families: "
          f"{', '.join(sorted(forest.families())) or 'none'}")


def cmd_predict(args):
    try:
        forest = loads_forest(Path(args.forest).read_bytes())
    except OSError as exc:
        raise DataFormatError(f"cannot read forest: {exc.strerror}") from exc
    model = None
    if "sm" in forest.families():
        if not args.model:
            raise UsageError("this forest uses SM features; pass --model")
        model = _load_model(args.model)
    elif args.model:
        model = _load_model(args.model)
    image = histogram_equalize(read_image(args.image), forest.feature_config.hist_eq_levels)
    ctx = FeatureContext(image, model, forest.feature_config)
    prob = predict_map(forest, image, model, ctx, args.max_depth)
    _write(args.out, encode_pfm(prob))
    if args.preview:
        _write(args.preview, encode_pgm(prob))
    print(f"map {prob.shape[1]}x{prob.shape[0]} mean {prob.mean():.6f}")


def cmd_fit(args):
    cfg = _config(args)
    prob = read_map(args.map)
    model = _load_model(args.model)
    if not np.all(np.isfinite(prob)):
        raise NumericFailure("probability map has non-finite values")
    if not np.any(prob > 0):
        raise NumericFailure("probability map is empty; nothing to fit")
    res = fit(prob, model, cfg.fitting)
    h, w = prob.shape
    if args.trace:
        _write(args.trace, res.trace_csv(), binary=False)
    if args.out_boundary:
        _write(args.out_boundary, landmarks_json(res.boundary), binary=False)
    if args.out_mask:
        write_mask(args.out_mask, rasterize(res.boundary, w, h))
    print(f"objective {res.objective:.6f} evals {res.evals} converged {res.converged}")


def _boundary(path_boundary, mask):
    if path_boundary:
        return polygon_points(read_landmarks(path_boundary))
    return threshold_contour(mask)


def cmd_eval(args):
    cfg = _config(args)
    pred, truth = read_mask(args.pred), read_mask(args.truth)
    acc, dice, jac = mask_metrics(pred, truth)
    try:
        mad, hd = boundary_distance(_boundary(args.pred_boundary, pred),
                                    _boundary(args.truth_boundary, truth))
    except EmptyBoundaryError:
        mad = hd = float("nan")
    header, row = list(COLUMNS), [acc, dice, jac, mad, hd]
    mm = cfg.eval.pixel_spacing_mm
    if mm is not None:
        header += ["mad_mm", "hd_mm"]
        row += [mad * mm, hd * mm]
    text = ",".join(header) + "\n" + ",".join(f"{v:.6f}" for v in row) + "\n"
    if args.out:
        _write(args.out, text, binary=False)
    sys.stdout.write(text)


def _progress(fold, rows):
    msg = " ".join(f"{r[0]}:dice={r[3]:.3f}" for r in rows)
    print(f"fold {fold}: {msg}", file=sys.stderr, flush=True)


def _methods(args, cfg):
    if args.methods:
        cfg.methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        try:
            cfg.validate()
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc


def cmd_loocv(args):
    cfg = _config(args)
    _methods(args, cfg)
    depths = cfg.eval.depths if args.depth_out else ()
    result = loocv(_items(args.dataset), cfg, depths, None if args.quiet else _progress)
    _write(args.out, result.to_csv(), binary=False)
    if args.depth_out:
        _write(args.depth_out, result.depth_table(), binary=False)
    for m in result.methods():
        s = result.summary(m)
        print(f"{m}: " + " ".join(f"{c}={s[c][0]:.4f}±{s[c][1]:.4f}" for c in COLUMNS))


def cmd_depth_sweep(args):
    cfg = _config(args)
    _methods(args, cfg)
    if args.depths:
        try:
            cfg.eval.depths = [int(d) for d in args.depths.split(",")]
        except ValueError as exc:
            raise UsageError(f"bad depth list {args.depths!r}") from exc
        cfg.validate()
    # trees are grown to the deepest requested depth, then truncated
    cfg.forest.max_depth = max(cfg.eval.depths)
    result = loocv(_items(args.dataset), cfg, cfg.eval.depths, None if args.quiet else _progress)
    table = result.depth_table()
    _write(args.out, table, binary=False)
    sys.stdout.write(table)


def cmd_config(args):
    sys.stdout.write(_config(args).dumps())


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, help="worker threads for tree training")
    common.add_argument("--workers", type=int, help="processes for leave-one-out folds")
    common.add_argument("--pixel-spacing-mm", type=float, help="add mm columns to reports")

    p = argparse.ArgumentParser(prog="smrf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("synth", help="generate a synthetic dataset", parents=[common])
    s.add_argument("--count", type=int, default=15)
    s.add_argument("--spec", help="phantom spec JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-model", help="PCA shape model from landmark files", parents=[common])
    s.add_argument("landmarks", nargs="+", help="landmark JSON files or dataset directories")
    s.add_argument("--variance-target", type=float, default=0.98)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_model)

    s = sub.add_parser("train", help="train a forest on a dataset", parents=[common])
    s.add_argument("--dataset", required=True)
    s.add_argument("--method", required=True, choices=METHODS)
    s.add_argument("--model", help="shape model (required for smrf)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="probability map of one image", parents=[common])
    s.add_argument("--forest", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--model")
    s.add_argument("--max-depth", type=int)
    s.add_argument("--out", required=True, help="PFM output")
    s.add_argument("--preview", help="optional 8-bit PGM copy")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("fit", help="fit the shape model to a probability map", parents=[common])
    s.add_argument("--map", required=True, help="PFM (or PGM) probability map")
    s.add_argument("--model", required=True)
    s.add_argument("--out-boundary")
    s.add_argument("--out-mask")
    s.add_argument("--trace", help="write the accepted-step trace as CSV")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("eval", help="metrics of a predicted mask", parents=[common])
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--pred-boundary")
    s.add_argument("--truth-boundary")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    for name, func, helptext in (("loocv", cmd_loocv, "leave-one-out comparison"),
                                 ("depth-sweep", cmd_depth_sweep, "jaccard against tree depth")):
        s = sub.add_parser(name, help=helptext, parents=[common])
        s.add_argument("--dataset", required=True)
        s.add_argument("--methods", help=f"comma list from {','.join(METHODS)}")
        s.add_argument("--out", required=True)
        s.add_argument("--quiet", action="store_true")
        if name == "loocv":
            s.add_argument("--depth-out", help="also write the depth table")
        else:
            s.add_argument("--depths", help="comma list, e.g. 8,12,16,20,24")
        s.set_defaults(func=func)

    s = sub.add_parser("config", help="print the effective configuration", parents=[common])
    s.add_argument("--dump", action="store_true",
                   help="print every setting, defaults included, as JSON (the default action)")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"smrf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"smrf {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, *DATA_ERRORS) as exc:
        print(f"smrf {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"smrf {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
