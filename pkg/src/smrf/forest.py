"""Binary classification forest over per-pixel features.

Trees are stored as flat node arrays. Every node, including split nodes,
keeps the class counts of the training pixels that reached it, so a tree can
be evaluated with a smaller depth limit. Each node draws its candidates from
its own random stream seeded by ``(tree_seed, node_id)``; a tree grown with
``max_depth=d`` is therefore identical to a deeper tree cut at depth ``d``.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .features import (
    APPEARANCE, CODE_LEN, POSITION, SM, FeatureConfig, FeatureContext, decode, encode,
    feature_column, feature_value, integral_image, sample_codes,
)
from .shape_model import ShapeModel, sample_params

FORMAT_VERSION = 1
MIN_GAIN = 1e-12


class ForestError(ValueError):
    pass


class ForestFormatError(ForestError):
    pass


class UnsupportedVersionError(ForestFormatError):
    pass


@dataclass
class ForestConfig:
    n_trees: int = 20
    max_depth: int = 24
    sample_fraction: float = 0.10
    candidates: int = 100
    n_thresholds: int = 10
    min_samples: int = 8

    def validate(self):
        if self.n_trees < 1 or self.max_depth < 0 or self.candidates < 1 or self.n_thresholds < 1:
            raise ForestError(f"invalid forest config {self}")
        if not 0 < self.sample_fraction <= 1:
            raise ForestError("sample_fraction must lie in (0, 1]")
        if self.min_samples < 1:
            raise ForestError("min_samples must be >= 1")


# ---------------------------------------------------------------- kernels

@njit(cache=True, nogil=True)
def _entropy(pos, n):
    if n == 0 or pos == 0 or pos == n:
        return 0.0
    p = pos / n
    return -(p * np.log2(p) + (1.0 - p) * np.log2(1.0 - p))


@njit(cache=True, nogil=True)
def _best_split(codes, u, idx, img, xs, ys, labels, integrals, pad, sm_maps):
    n = idx.shape[0]
    n_thr = u.shape[1]
    nimg = np.empty(n, dtype=np.int64)
    nx = np.empty(n, dtype=np.int64)
    ny = np.empty(n, dtype=np.int64)
    nlab = np.empty(n, dtype=np.int64)
    total_pos = 0
    for k in range(n):
        s = idx[k]
        nimg[k] = img[s]
        nx[k] = xs[s]
        ny[k] = ys[s]
        nlab[k] = labels[s]
        total_pos += nlab[k]
    h_parent = _entropy(total_pos, n)
    vals = np.empty(n)
    taus = np.empty(n_thr)
    # bin j holds samples with exactly j sorted thresholds <= value
    bin_n = np.empty(n_thr + 1, dtype=np.int64)
    bin_pos = np.empty(n_thr + 1, dtype=np.int64)
    best_c = -1
    best_tau = 0.0
    best_gain = 0.0
    for c in range(codes.shape[0]):
        feature_column(codes[c], integrals, nimg, nx, ny, pad, sm_maps, vals)
        lo = np.inf
        hi = -np.inf
        for k in range(n):
            v = vals[k]
            if v < lo:
                lo = v
            if v > hi:
                hi = v
        if not hi > lo:
            continue
        for t in range(n_thr):
            taus[t] = lo + u[c, t] * (hi - lo)
        order = np.argsort(taus)
        st = taus[order]
        bin_n[:] = 0
        bin_pos[:] = 0
        for k in range(n):
            v = vals[k]
            j = 0
            for t in range(n_thr):
                j += st[t] <= v
            bin_n[j] += 1
            bin_pos[j] += nlab[k]
        # left child of sorted threshold t: samples in bins t+1..n_thr
        nl = 0
        pl = 0
        for t in range(n_thr - 1, -1, -1):
            nl += bin_n[t + 1]
            pl += bin_pos[t + 1]
            nr = n - nl
            if nl == 0 or nr == 0:
                continue
            gain = h_parent - (nl / n) * _entropy(pl, nl) - (nr / n) * _entropy(total_pos - pl, nr)
            if gain > best_gain:
                best_gain = gain
                best_c = c
                best_tau = st[t]
    return best_c, best_tau, best_gain


@njit(cache=True, nogil=True)
def _go_left(code, tau, idx, img, xs, ys, integrals, pad, sm_maps):
    vals = np.empty(idx.shape[0])
    feature_column(code, integrals, img[idx], xs[idx], ys[idx], pad, sm_maps, vals)
    return vals >= tau


@njit(cache=True, nogil=True)
def _predict_tree(codes, tau, left, right, prob, depth, integ, pad, sm_maps,
                  height, width, depth_limit):
    out = np.empty((height, width))
    for y in range(height):
        for x in range(width):
            node = 0
            while left[node] >= 0 and depth[node] < depth_limit:
                if feature_value(codes[node], integ, 0, x, y, pad, sm_maps) >= tau[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[y, x] = prob[node]
    return out


@njit(cache=True, nogil=True)
def _predict_tree_depths(codes, tau, left, right, prob, depth, integ, pad, sm_maps,
                         height, width, limits):
    # one descent per pixel; limits ascending, out[i] = prediction capped at limits[i]
    out = np.empty((limits.shape[0], height, width))
    for y in range(height):
        for x in range(width):
            node = 0
            i = 0
            while True:
                while i < limits.shape[0] and depth[node] >= limits[i]:
                    out[i, y, x] = prob[node]
                    i += 1
                if i == limits.shape[0] or left[node] < 0:
                    break
                if feature_value(codes[node], integ, 0, x, y, pad, sm_maps) >= tau[node]:
                    node = left[node]
                else:
                    node = right[node]
            for j in range(i, limits.shape[0]):
                out[j, y, x] = prob[node]
    return out


# ---------------------------------------------------------------- data

class TrainingData:
    """Equalised training images, their label masks and sampling geometry."""

    def __init__(self, images, masks, feature_config: FeatureConfig | None = None):
        self.feature_config = feature_config or FeatureConfig()
        images = [np.asarray(im, dtype=np.float64) for im in images]
        masks = [np.asarray(m).astype(np.int64) for m in masks]
        if not images:
            raise ForestError("empty training set")
        shape = images[0].shape
        if any(im.shape != shape for im in images) or any(m.shape != shape for m in masks):
            raise ForestError("training images and masks must share one size")
        if len(images) != len(masks):
            raise ForestError("image and mask counts differ")
        self.height, self.width = shape
        self.n_images = len(images)
        pad = self.feature_config.pad
        self.pad = pad
        self.integrals = np.stack([integral_image(im, pad) for im in images])
        self.labels = np.concatenate([(m.ravel() > 0).astype(np.int64) for m in masks])

    @property
    def n_pixels(self) -> int:
        return self.labels.size

    def decompose(self, flat):
        per = self.height * self.width
        img = (flat // per).astype(np.int64)
        rem = flat % per
        return img, (rem % self.width).astype(np.int64), (rem // self.width).astype(np.int64)


class SMPool:
    """A table of SM shape vectors with their precomputed distance maps."""

    def __init__(self, shapes, maps):
        self.shapes = np.asarray(shapes, dtype=np.float64)
        self.maps = maps

    def __len__(self):
        return self.shapes.shape[0]

    @classmethod
    def sample(cls, model: ShapeModel, size: int, s_feature: float, rng, width: int, height: int,
               sm_cache: dict | None = None):
        shapes = np.array([sample_params(model, s_feature, rng) for _ in range(size)])
        shapes = shapes.reshape(size, model.n_modes)
        ctx = FeatureContext(np.zeros((height, width)), model, sm_cache=sm_cache)
        maps = np.empty((size, height, width))
        for i, b in enumerate(shapes):
            maps[i] = ctx.sm_map(b)
        return cls(shapes, maps)

    @classmethod
    def empty(cls, n_modes: int = 0):
        return cls(np.zeros((0, n_modes)), np.zeros((1, 1, 1)))


# ---------------------------------------------------------------- tree

@dataclass
class Tree:
    codes: np.ndarray
    tau: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, 2): background, myocardium
    depth: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.tau.size

    @property
    def prob(self) -> np.ndarray:
        return self.counts[:, 1] / self.counts.sum(axis=1)

    def is_leaf(self) -> np.ndarray:
        return self.left < 0

    def max_path(self) -> int:
        return int(self.depth[self.is_leaf()].max())

    def predict(self, integ, pad, sm_maps, height, width, max_depth=None) -> np.ndarray:
        limit = np.iinfo(np.int64).max if max_depth is None else int(max_depth)
        return _predict_tree(self.codes, self.tau, self.left, self.right, self.prob, self.depth,
                             integ.reshape((1,) + integ.shape), pad, sm_maps, height, width, limit)


def node_rng(tree_seed: int, node_id: int) -> np.random.Generator:
    return np.random.default_rng([tree_seed, node_id])


def subsample(data: TrainingData, fraction: float, tree_seed: int) -> np.ndarray:
    """Sorted flat pixel indices drawn without replacement for one tree."""
    rng = np.random.default_rng([tree_seed])
    n = max(1, int(round(fraction * data.n_pixels)))
    return np.sort(rng.choice(data.n_pixels, size=n, replace=False))


def train_tree(data: TrainingData, samples, config: ForestConfig, weights, tree_seed: int,
               sm_pool: SMPool | None = None) -> Tree:
    """Grow one tree on the flat pixel indices ``samples``."""
    samples = np.asarray(samples, dtype=np.int64)
    if samples.size == 0:
        raise ForestError("cannot train a tree on zero samples")
    pool = sm_pool or SMPool.empty()
    img, xs, ys = data.decompose(samples)
    labels = data.labels[samples]
    fc = data.feature_config
    codes, taus, lefts, rights, counts, depths, gains = [], [], [], [], [], [], []

    def new_node(idx, d):
        pos = int(labels[idx].sum())
        codes.append(np.zeros(CODE_LEN, dtype=np.int64))
        taus.append(0.0)
        lefts.append(-1)
        rights.append(-1)
        counts.append((idx.size - pos, pos))
        depths.append(d)
        gains.append(0.0)
        return len(taus) - 1

    root = new_node(np.arange(samples.size), 0)
    stack = [(root, 1, np.arange(samples.size, dtype=np.int64))]
    while stack:
        node, node_id, idx = stack.pop()
        d = depths[node]
        n_bg, n_fg = counts[node]
        if d >= config.max_depth or idx.size < config.min_samples or n_bg == 0 or n_fg == 0:
            continue
        rng = node_rng(tree_seed, node_id)
        cand = sample_codes(rng, config.candidates, weights, fc, len(pool))
        u = rng.random((config.candidates, config.n_thresholds))
        c, tau, gain = _best_split(cand, u, idx, img, xs, ys, labels, data.integrals, data.pad,
                                   pool.maps)
        if c < 0 or gain <= MIN_GAIN:
            continue
        go = _go_left(cand[c], tau, idx, img, xs, ys, data.integrals, data.pad, pool.maps)
        li = new_node(idx[go], d + 1)
        ri = new_node(idx[~go], d + 1)
        codes[node] = cand[c]
        taus[node] = tau
        lefts[node] = li
        rights[node] = ri
        gains[node] = gain
        # right pushed first so the left subtree is grown (and numbered) first
        stack.append((ri, 2 * node_id + 1, idx[~go]))
        stack.append((li, 2 * node_id, idx[go]))
    return Tree(np.array(codes, dtype=np.int64).reshape(-1, CODE_LEN), np.array(taus),
                np.array(lefts, dtype=np.int64), np.array(rights, dtype=np.int64),
                np.array(counts, dtype=np.int64).reshape(-1, 2), np.array(depths, dtype=np.int64),
                np.array(gains))


# ---------------------------------------------------------------- forest

@dataclass
class Forest:
    trees: list
    config: ForestConfig
    feature_config: FeatureConfig
    method: str = "custom"
    sm_shapes: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def families(self) -> set[str]:
        names = {APPEARANCE: "appearance", POSITION: "position", SM: "sm"}
        out = set()
        for t in self.trees:
            split = ~t.is_leaf()
            out.update(names[int(f)] for f in np.unique(t.codes[split, 0]))
        return out

    def sm_maps(self, ctx: FeatureContext) -> np.ndarray:
        """Distance-map stack aligned with ``sm_shapes`` (only used rows filled)."""
        used = set()
        for t in self.trees:
            split = (~t.is_leaf()) & (t.codes[:, 0] == SM)
            used.update(int(i) for i in t.codes[split, 10])
        if not used:
            return np.zeros((1, 1, 1))
        maps = np.zeros((len(self.sm_shapes), ctx.height, ctx.width))
        for i in sorted(used):
            maps[i] = ctx.sm_map(self.sm_shapes[i])
        return maps

    def depth_maps(self, ctx: FeatureContext, depths) -> dict:
        """Forest mean maps for several depth caps from a single descent per tree.

        ``None`` in ``depths`` means no cap.
        """
        sm = self.sm_maps(ctx)
        big = np.iinfo(np.int64).max
        keys = sorted(set(depths), key=lambda d: big if d is None else d)
        limits = np.array([big if d is None else int(d) for d in keys], dtype=np.int64)
        integ = ctx.integral.reshape((1,) + ctx.integral.shape)
        total = np.zeros((limits.size, ctx.height, ctx.width))
        for t in self.trees:
            total += _predict_tree_depths(t.codes, t.tau, t.left, t.right, t.prob, t.depth, integ,
                                          self.feature_config.pad, sm, ctx.height, ctx.width,
                                          limits)
        total /= len(self.trees)
        return {d: total[i] for i, d in enumerate(keys)}

    def tree_maps(self, ctx: FeatureContext, max_depth=None) -> np.ndarray:
        """Per-tree probability maps, shape ``(n_trees, H, W)``."""
        sm = self.sm_maps(ctx)
        return np.stack([t.predict(ctx.integral, self.feature_config.pad, sm, ctx.height,
                                   ctx.width, max_depth) for t in self.trees])

    # -- serialisation

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "config": {"forest": asdict(self.config), "features": asdict(self.feature_config),
                       "method": self.method, "n_modes": int(self.sm_shapes.shape[1])},
            "trees": [_node_to_dict(t, 0, self.sm_shapes) for t in self.trees],
        }

    def dumps(self) -> bytes:
        return json.dumps(self.to_dict(), separators=(",", ":")).encode("utf-8")


def tree_seeds(master_seed: int, n_trees: int) -> list[int]:
    children = np.random.SeedSequence(master_seed).spawn(n_trees)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def train_forest(data: TrainingData, config: ForestConfig, weights, seed: int,
                 sm_pool: SMPool | None = None, method: str = "custom", threads: int = 1) -> Forest:
    """Train ``n_trees`` trees, each on its own pixel subsample and stream."""
    config.validate()
    weights = np.asarray(weights, dtype=np.float64)
    if weights[SM] > 0 and (sm_pool is None or len(sm_pool) == 0):
        raise ForestError("SM features need a non-empty shape pool")
    seeds = tree_seeds(seed, config.n_trees)

    def grow(ts):
        return train_tree(data, subsample(data, config.sample_fraction, ts), config, weights, ts,
                          sm_pool)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            trees = list(ex.map(grow, seeds))
    else:
        trees = [grow(s) for s in seeds]
    shapes = sm_pool.shapes if sm_pool is not None else np.zeros((0, 0))
    return _compact(Forest(trees, config, data.feature_config, method, shapes))


def _compact(forest: Forest) -> Forest:
    """Drop SM shapes no split uses and renumber the references."""
    used = sorted({int(i) for t in forest.trees
                   for i in t.codes[(~t.is_leaf()) & (t.codes[:, 0] == SM), 10]})
    remap = {old: new for new, old in enumerate(used)}
    for t in forest.trees:
        sel = (~t.is_leaf()) & (t.codes[:, 0] == SM)
        t.codes[sel, 10] = [remap[int(i)] for i in t.codes[sel, 10]]
    n_modes = forest.sm_shapes.shape[1] if forest.sm_shapes.ndim == 2 else 0
    forest.sm_shapes = (forest.sm_shapes[used] if used
                        else np.zeros((0, n_modes)))
    return forest


def predict_map(forest: Forest, image, model: ShapeModel | None = None, ctx: FeatureContext | None = None,
                max_depth=None) -> np.ndarray:
    """Mean of per-tree leaf probabilities at every pixel."""
    if ctx is None:
        ctx = FeatureContext(image, model, forest.feature_config)
    return forest.tree_maps(ctx, max_depth).mean(axis=0)


# ---------------------------------------------------------------- JSON

def _params(code, sm_shapes) -> tuple[str, dict]:
    desc = decode(code, sm_shapes)
    fam = int(code[0])
    if fam == APPEARANCE:
        return "appearance", {"offset": list(desc.offset), "box": list(desc.box), "mode": desc.mode,
                              "offset2": list(desc.offset2), "box2": list(desc.box2)}
    if fam == POSITION:
        return "position", {"axis": desc.axis}
    return "sm", {"b": [float(v) for v in desc.b]}


def _node_to_dict(tree: Tree, i: int, sm_shapes) -> dict:
    counts = [int(c) for c in tree.counts[i]]
    if tree.left[i] < 0:
        return {"leaf": {"counts": counts}}
    family, params = _params(tree.codes[i], sm_shapes)
    return {"split": {"family": family, "params": params, "tau": float(tree.tau[i]),
                      "gain": float(tree.gain[i])},
            "counts": counts,
            "left": _node_to_dict(tree, int(tree.left[i]), sm_shapes),
            "right": _node_to_dict(tree, int(tree.right[i]), sm_shapes)}


class _TreeBuilder:
    def __init__(self, shape_index: dict, shapes: list):
        self.codes, self.tau, self.left, self.right = [], [], [], []
        self.counts, self.depth, self.gain = [], [], []
        self.shape_index = shape_index
        self.shapes = shapes

    def add(self, node, path: str, d: int) -> int:
        if not isinstance(node, dict):
            raise ForestFormatError(f"{path}: node must be an object")
        i = len(self.tau)
        self.codes.append(np.zeros(CODE_LEN, dtype=np.int64))
        self.tau.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.depth.append(d)
        self.gain.append(0.0)
        try:
            if "leaf" in node:
                counts = node["leaf"]["counts"]
            else:
                counts = node["counts"]
            counts = (int(counts[0]), int(counts[1]))
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise ForestFormatError(f"{path}: bad counts ({exc})") from exc
        if min(counts) < 0 or sum(counts) < 1:
            raise ForestFormatError(f"{path}: counts must be nonnegative with a positive sum")
        self.counts.append(counts)
        if "leaf" in node:
            return i
        try:
            split = node["split"]
            self.codes[i] = self._code(split["family"], split["params"])
            self.tau[i] = float(split["tau"])
            self.gain[i] = float(split.get("gain", 0.0))
            left, right = node["left"], node["right"]
        except ForestFormatError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ForestFormatError(f"{path}: malformed split ({exc!r})") from exc
        self.left[i] = self.add(left, path + ".left", d + 1)
        self.right[i] = self.add(right, path + ".right", d + 1)
        return i

    def _code(self, family, params):
        from .features import Appearance, Position, ShapeFeature
        if family == "appearance":
            return encode(Appearance(tuple(params["offset"]), tuple(params["box"]), params["mode"],
                                     tuple(params["offset2"]), tuple(params["box2"])))
        if family == "position":
            return encode(Position(params["axis"]))
        if family == "sm":
            b = np.asarray(params["b"], dtype=np.float64)
            key = b.tobytes()
            if key not in self.shape_index:
                self.shape_index[key] = len(self.shapes)
                self.shapes.append(b)
            return encode(ShapeFeature(b), self.shape_index[key])
        raise ForestFormatError(f"unknown feature family {family!r}")

    def build(self) -> Tree:
        return Tree(np.array(self.codes, dtype=np.int64).reshape(-1, CODE_LEN), np.array(self.tau),
                    np.array(self.left, dtype=np.int64), np.array(self.right, dtype=np.int64),
                    np.array(self.counts, dtype=np.int64).reshape(-1, 2),
                    np.array(self.depth, dtype=np.int64), np.array(self.gain))


def loads_forest(payload: bytes | str) -> Forest:
    """Parse a forest document; raises :class:`ForestFormatError` on any defect."""
    try:
        doc = json.loads(payload)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ForestFormatError(f"<root>: unparseable payload ({exc})") from exc
    if not isinstance(doc, dict):
        raise ForestFormatError("<root>: expected an object")
    if doc.get("version") != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported forest version {doc.get('version')!r}")
    try:
        cfg = doc["config"]
        fconf = ForestConfig(**cfg["forest"])
        feat = FeatureConfig(**cfg["features"])
        method = cfg.get("method", "custom")
        n_modes = int(cfg.get("n_modes", 0))
        tree_docs = doc["trees"]
    except (KeyError, TypeError) as exc:
        raise ForestFormatError(f"config: {exc!r}") from exc
    if not isinstance(tree_docs, list) or not tree_docs:
        raise ForestFormatError("trees: expected a non-empty list")
    shape_index, shapes = {}, []
    trees = []
    for k, td in enumerate(tree_docs):
        b = _TreeBuilder(shape_index, shapes)
        b.add(td, f"trees[{k}]", 0)
        trees.append(b.build())
    sm_shapes = np.array(shapes).reshape(len(shapes), n_modes) if shapes else np.zeros((0, n_modes))
    return Forest(trees, fconf, feat, method, sm_shapes)


serialize_forest = Forest.dumps
deserialize_forest = loads_forest
