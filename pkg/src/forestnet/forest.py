"""Axis-aligned decision trees and forests over contextual offset features."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .features import FeatureStack, OffsetFeatureId

log = logging.getLogger(__name__)

FOREST_FORMAT = "forestnet.forest"
FOREST_VERSION = 1


class SchemaError(ValueError):
    pass


class SplitNode(NamedTuple):
    feature: OffsetFeatureId
    threshold: float
    left: int
    right: int


class LeafNode(NamedTuple):
    votes: np.ndarray
    depth: int
    path: tuple[tuple[int, str], ...]


@dataclass
class DecisionTree:
    """Node arena. Split nodes have ``left >= 0``; leaves have ``left == right == -1``.

    A sample goes left at split ``n`` iff ``x[f(n)] < threshold[n]``.
    """

    channel: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    votes: np.ndarray
    max_depth: int = 0
    root: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    @property
    def n_classes(self) -> int:
        return self.votes.shape[1]

    @property
    def is_leaf(self) -> np.ndarray:
        return self.left < 0

    @property
    def split_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.is_leaf)

    @property
    def leaf_ids(self) -> np.ndarray:
        return np.flatnonzero(self.is_leaf)

    @property
    def depth(self) -> int:
        return max((len(p) for p in self.leaf_paths().values()), default=0)

    def node(self, i: int) -> SplitNode | LeafNode:
        if self.left[i] >= 0:
            fid = OffsetFeatureId(int(self.channel[i]), int(self.dx[i]), int(self.dy[i]))
            return SplitNode(fid, float(self.threshold[i]), int(self.left[i]), int(self.right[i]))
        path = self.leaf_paths()[i]
        return LeafNode(self.votes[i].copy(), len(path), path)

    def leaf_paths(self) -> dict[int, tuple[tuple[int, str], ...]]:
        """Leaf id -> ordered ``(split id, "L"|"R")`` pairs from the root."""
        out = {}
        todo = [(self.root, ())]
        while todo:
            n, path = todo.pop()
            if self.left[n] < 0:
                out[n] = path
            else:
                todo.append((int(self.right[n]), path + ((n, "R"),)))
                todo.append((int(self.left[n]), path + ((n, "L"),)))
        return out

    def features(self) -> list[OffsetFeatureId]:
        return [OffsetFeatureId(int(self.channel[n]), int(self.dx[n]), int(self.dy[n]))
                for n in self.split_ids]

    def copy(self) -> "DecisionTree":
        return DecisionTree(self.channel.copy(), self.dx.copy(), self.dy.copy(),
                            self.threshold.copy(), self.left.copy(), self.right.copy(),
                            self.votes.copy(), self.max_depth, self.root)

    def route(self, fetch: Callable) -> np.ndarray:
        """Leaf reached by every sample of ``fetch``.

        ``fetch(idx, channel, dx, dy)`` returns the feature values of samples ``idx``
        for per-sample feature ids; ``len(fetch)`` is the sample count.
        """
        node = np.full(len(fetch), self.root, dtype=np.intp)
        active = np.arange(len(fetch))
        while True:
            active = active[self.left[node[active]] >= 0]
            if active.size == 0:
                return node
            cur = node[active]
            v = fetch(active, self.channel[cur], self.dx[cur], self.dy[cur])
            node[active] = np.where(v < self.threshold[cur], self.left[cur], self.right[cur])


@dataclass
class Forest:
    trees: list[DecisionTree]
    n_classes: int
    n_channels: int
    max_offset: int = 0

    def __post_init__(self):
        for t in self.trees:
            if t.n_classes != self.n_classes:
                raise SchemaError("tree class count %d != forest class count %d"
                                  % (t.n_classes, self.n_classes))

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def copy(self) -> "Forest":
        return Forest([t.copy() for t in self.trees], self.n_classes, self.n_channels, self.max_offset)


# ---------------------------------------------------------------------------
# feature access


class ImageFetcher:
    """Offset lookups for every pixel of one H x W x C value array (clamped borders)."""

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values)
        self.h, self.w = self.values.shape[:2]
        self.n = self.h * self.w

    def __len__(self):
        return self.n

    def __call__(self, idx, channel, dx, dy):
        y, x = np.divmod(idx, self.w)
        yy = np.clip(y + dy, 0, self.h - 1)
        xx = np.clip(x + dx, 0, self.w - 1)
        return self.values[yy, xx, channel]


class SampleSet:
    """Labelled pixels drawn from several value arrays, addressed by flat sample index."""

    def __init__(self, arrays: Sequence[np.ndarray], image: np.ndarray, ys: np.ndarray,
                 xs: np.ndarray, labels: np.ndarray):
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        chans = {a.shape[2] for a in arrays}
        if len(chans) != 1:
            raise SchemaError("all sample images must have the same channel count")
        self.n_channels = chans.pop()
        self.heights = np.array([a.shape[0] for a in arrays])
        self.widths = np.array([a.shape[1] for a in arrays])
        sizes = self.heights * self.widths
        self.base = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.intp)
        self.flat = np.concatenate([a.reshape(-1, self.n_channels) for a in arrays], axis=0)
        self.image = np.asarray(image, dtype=np.intp)
        self.ys = np.asarray(ys, dtype=np.intp)
        self.xs = np.asarray(xs, dtype=np.intp)
        self.labels = np.asarray(labels, dtype=np.intp)

    def __len__(self):
        return len(self.labels)

    def __call__(self, idx, channel, dx, dy):
        img = self.image[idx]
        h = self.heights[img]
        w = self.widths[img]
        yy = np.clip(self.ys[idx] + dy, 0, h - 1)
        xx = np.clip(self.xs[idx] + dx, 0, w - 1)
        return self.flat[self.base[img] + yy * w + xx, channel]

    def subset(self, idx) -> "SampleSet":
        out = object.__new__(SampleSet)
        out.__dict__.update(self.__dict__)
        out.image, out.ys, out.xs, out.labels = (a[idx] for a in (self.image, self.ys, self.xs, self.labels))
        return out

    @classmethod
    def from_features(cls, rows: np.ndarray, labels) -> "SampleSet":
        """Plain feature vectors (one per row), usable only with zero-offset features."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[:, None]
        n = len(rows)
        return cls([rows[:, None, :]], np.zeros(n), np.arange(n), np.zeros(n), labels)


def as_fetcher(x) -> Callable[[OffsetFeatureId], float]:
    """Single-sample accessor from a callable, a ``(stack, (x, y))`` pair or a 1-D vector."""
    if callable(x):
        return x
    if isinstance(x, tuple) and len(x) == 2 and isinstance(x[0], FeatureStack):
        from .features import lookup_offset
        stack, pixel = x
        return lambda fid: lookup_offset(stack, pixel, fid)
    vec = np.asarray(x, dtype=np.float64)

    def get(fid):
        if fid.dx or fid.dy:
            raise ValueError("a plain feature vector has no spatial context")
        return float(vec[fid.channel])
    return get


# ---------------------------------------------------------------------------
# training


@dataclass
class TreeParams:
    n_classes: int
    max_depth: int = 12
    min_samples: int = 25
    n_channels: int | None = None  # channels tried per node; None -> sqrt(channel count)
    n_offsets: int = 10  # offsets tried per sampled channel
    n_thresholds: int = 20
    max_offset: int = 0
    channels: Sequence[int] | None = None  # restrict candidate channels


def _entropy(counts: np.ndarray) -> np.ndarray:
    tot = counts.sum(axis=-1, keepdims=True)
    p = np.divide(counts, tot, out=np.zeros_like(counts, dtype=np.float64), where=tot > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log2(p), 0.0).sum(axis=-1)
    return h


def best_threshold(values: np.ndarray, onehot: np.ndarray, n_thresholds: int):
    """Best information-gain threshold among quantile midpoints of ``values``.

    Returns ``(gain, threshold)``; ``gain`` is -inf when no split separates the values.
    """
    order = np.argsort(values, kind="stable")
    v = values[order]
    uniq = np.unique(v)
    if len(uniq) < 2:
        return -np.inf, np.nan
    gaps = len(uniq) - 1
    if gaps <= n_thresholds:
        pos = np.arange(gaps)
    else:
        pos = np.unique(np.round(np.linspace(0, gaps - 1, n_thresholds)).astype(np.intp))
    thr = 0.5 * (uniq[pos] + uniq[pos + 1])
    cum = np.vstack([np.zeros((1, onehot.shape[1])), np.cumsum(onehot[order], axis=0)])
    n_left = np.searchsorted(v, thr, side="left")
    left = cum[n_left]
    total = cum[-1]
    right = total - left
    n = len(v)
    ok = (n_left > 0) & (n_left < n)
    if not ok.any():
        return -np.inf, np.nan
    gain = _entropy(total) - (n_left / n) * _entropy(left) - ((n - n_left) / n) * _entropy(right)
    gain = np.where(ok, gain, -np.inf)
    i = int(np.argmax(gain))
    return float(gain[i]), float(thr[i])


def train_tree(samples: SampleSet, params: TreeParams, seed=None) -> DecisionTree:
    """Greedy top-down tree over randomly sampled (channel, offset) candidates."""
    n = len(samples)
    if n == 0:
        raise ValueError("cannot train a tree on zero samples")
    rng = np.random.default_rng(seed)
    C = params.n_classes
    labels = samples.labels
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError("labels must lie in [0, %d)" % C)
    onehot = np.eye(C)[labels]
    channels = np.asarray(params.channels if params.channels is not None
                          else np.arange(samples.n_channels))
    n_ch = params.n_channels or max(1, int(round(math.sqrt(len(channels)))))
    n_ch = min(n_ch, len(channels))
    mo = params.max_offset

    chan, dxs, dys, thr, left, right, votes = [], [], [], [], [], [], []

    def new_node():
        for lst, v in ((chan, -1), (dxs, 0), (dys, 0), (thr, np.nan), (left, -1), (right, -1)):
            lst.append(v)
        votes.append(np.zeros(C))
        return len(left) - 1

    root = new_node()
    todo = [(root, np.arange(n), 0)]
    while todo:
        node, idx, depth = todo.pop()
        counts = onehot[idx].sum(axis=0)
        pure = np.count_nonzero(counts) <= 1
        if pure or depth >= params.max_depth or len(idx) < params.min_samples:
            votes[node] = counts
            continue
        best = (-np.inf, None, None)
        for ch in rng.choice(channels, size=n_ch, replace=False):
            offs = rng.integers(-mo, mo + 1, size=(params.n_offsets, 2)) if mo > 0 \
                else np.zeros((1, 2), dtype=np.int64)
            for ox, oy in offs:
                vals = samples(idx, np.full(len(idx), ch), np.full(len(idx), ox), np.full(len(idx), oy))
                g, t = best_threshold(vals, onehot[idx], params.n_thresholds)
                if g > best[0]:
                    best = (g, (int(ch), int(ox), int(oy)), t)
        gain, fid, t = best
        if fid is None or gain <= 1e-12:
            votes[node] = counts
            continue
        vals = samples(idx, np.full(len(idx), fid[0]), np.full(len(idx), fid[1]), np.full(len(idx), fid[2]))
        go_left = vals < t
        chan[node], dxs[node], dys[node] = fid
        thr[node] = t
        lnode = new_node()
        rnode = new_node()
        left[node], right[node] = lnode, rnode
        todo.append((rnode, idx[~go_left], depth + 1))
        todo.append((lnode, idx[go_left], depth + 1))

    return DecisionTree(np.array(chan, dtype=np.int64), np.array(dxs, dtype=np.int64),
                        np.array(dys, dtype=np.int64), np.array(thr, dtype=np.float64),
                        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                        np.array(votes, dtype=np.float64), params.max_depth)


def train_forest(samples: SampleSet, params: TreeParams, n_trees: int, seed=None,
                 n_jobs: int = 1) -> Forest:
    seeds = np.random.SeedSequence(seed).spawn(n_trees)
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            trees = list(ex.map(lambda s: train_tree(samples, params, s), seeds))
    else:
        trees = [train_tree(samples, params, s) for s in seeds]
    return Forest(trees, params.n_classes, samples.n_channels, params.max_offset)


# ---------------------------------------------------------------------------
# prediction


def normalize_votes(v: np.ndarray) -> np.ndarray:
    """Divide by the class total along the last axis; all-zero rows become uniform."""
    v = np.asarray(v, dtype=np.float64)
    tot = v.sum(axis=-1, keepdims=True)
    C = v.shape[-1]
    safe = np.where(tot == 0, 1.0, tot)
    return np.where(tot == 0, 1.0 / C, v / safe)


def _leaf_single(tree: DecisionTree, get) -> int:
    n = tree.root
    while tree.left[n] >= 0:
        fid = OffsetFeatureId(int(tree.channel[n]), int(tree.dx[n]), int(tree.dy[n]))
        n = int(tree.left[n] if get(fid) < tree.threshold[n] else tree.right[n])
    return n


def tree_leaf(tree: DecisionTree, x) -> int:
    return _leaf_single(tree, as_fetcher(x))


def tree_predict(tree: DecisionTree, x) -> np.ndarray:
    return normalize_votes(tree.votes[tree_leaf(tree, x)])


def forest_votes(forest: Forest, x) -> np.ndarray:
    get = as_fetcher(x)
    return sum(t.votes[_leaf_single(t, get)] for t in forest.trees)


def forest_predict(forest: Forest, x) -> np.ndarray:
    return normalize_votes(forest_votes(forest, x))


def _values(stack) -> np.ndarray:
    return stack.values if isinstance(stack, FeatureStack) else np.asarray(stack)


def leaf_maps(forest: Forest, stack) -> np.ndarray:
    """T x H x W array of reached leaf ids."""
    values = _values(stack)
    if values.shape[2] != forest.n_channels:
        raise SchemaError("stack has %d channels, forest expects %d" % (values.shape[2], forest.n_channels))
    fetch = ImageFetcher(values)
    h, w = values.shape[:2]
    return np.stack([t.route(fetch).reshape(h, w) for t in forest.trees])


def forest_votes_image(forest: Forest, stack) -> np.ndarray:
    """H x W x C per-pixel sum of the reached leaves' votes."""
    leaves = leaf_maps(forest, stack)
    out = np.zeros(leaves.shape[1:] + (forest.n_classes,))
    for t, lm in zip(forest.trees, leaves):
        out += t.votes[lm]
    return out


def forest_predict_image(forest: Forest, stack) -> np.ndarray:
    """H x W x C class-probability maps."""
    return normalize_votes(forest_votes_image(forest, stack))


# ---------------------------------------------------------------------------
# serialization (JSON; floats are written with repr so they round-trip exactly)


def tree_to_dict(tree: DecisionTree) -> dict:
    nodes = []
    for i in range(tree.n_nodes):
        if tree.left[i] >= 0:
            nodes.append({"type": "split", "id": i,
                          "feature": [int(tree.channel[i]), int(tree.dx[i]), int(tree.dy[i])],
                          "threshold": float(tree.threshold[i]),
                          "left": int(tree.left[i]), "right": int(tree.right[i])})
        else:
            nodes.append({"type": "leaf", "id": i, "votes": [float(v) for v in tree.votes[i]]})
    return {"max_depth": tree.max_depth, "root": tree.root, "nodes": nodes}


def tree_from_dict(d: dict, n_classes: int) -> DecisionTree:
    nodes = sorted(d["nodes"], key=lambda r: r["id"])
    m = len(nodes)
    chan = np.full(m, -1, dtype=np.int64)
    dx = np.zeros(m, dtype=np.int64)
    dy = np.zeros(m, dtype=np.int64)
    thr = np.full(m, np.nan)
    left = np.full(m, -1, dtype=np.int64)
    right = np.full(m, -1, dtype=np.int64)
    votes = np.zeros((m, n_classes))
    for r in nodes:
        i = r["id"]
        if r["type"] == "split":
            chan[i], dx[i], dy[i] = r["feature"]
            thr[i] = r["threshold"]
            left[i], right[i] = r["left"], r["right"]
        else:
            votes[i] = r["votes"]
    return DecisionTree(chan, dx, dy, thr, left, right, votes, d.get("max_depth", 0), d.get("root", 0))


def forest_to_dict(forest: Forest) -> dict:
    return {"format": FOREST_FORMAT, "version": FOREST_VERSION,
            "n_classes": forest.n_classes, "n_channels": forest.n_channels,
            "max_offset": forest.max_offset,
            "trees": [tree_to_dict(t) for t in forest.trees]}


def forest_from_dict(d: dict) -> Forest:
    if d.get("format") != FOREST_FORMAT:
        raise ValueError("not a forest record")
    if d.get("version") != FOREST_VERSION:
        raise ValueError("unsupported forest version %r" % d.get("version"))
    C = d["n_classes"]
    return Forest([tree_from_dict(t, C) for t in d["trees"]], C, d["n_channels"], d["max_offset"])
