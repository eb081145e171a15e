"""Mapping a trained sparse net back onto its forest stack.

``map_back_1`` reads thresholds and leaf votes directly off the weights.
``map_back_2`` re-estimates every leaf's votes as the mean, over the training
samples routed to it, of the net's per-tree output contribution
``z_t(x)[c] = sum_{l in tree t} a_x(leaf unit l) * w(l, c)``, one level at a
time so later levels see the already-updated earlier ones.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autocontext import ForestStack, level_input, stack_predict_image
from .deepnet import SparseNet, _forward
from .features import FeatureStack
from .forest import ImageFetcher

log = logging.getLogger(__name__)


class MapBackError(ValueError):
    pass


def _check_topology(net: SparseNet, source: ForestStack):
    if net.n_levels != source.n_levels or net.n_classes != source.n_classes:
        raise MapBackError("net and stack disagree on levels or classes")
    for k, (block, forest) in enumerate(zip(net.blocks, source.levels)):
        for u, (t, n) in enumerate(zip(block.split_tree, block.split_node)):
            tree = forest.trees[t]
            if (tree.left[n] < 0 or tree.channel[n] != block.in_channel[u]
                    or tree.dx[n] != block.in_dx[u] or tree.dy[n] != block.in_dy[u]):
                raise MapBackError("level %d split unit %d does not match the source tree" % (k + 1, u))


def map_back_1(net: SparseNet, source: ForestStack) -> ForestStack:
    """Thresholds ``-b/w`` from the split units, votes from the leaf-to-class weights."""
    _check_topology(net, source)
    out = source.copy()
    for k, (block, forest) in enumerate(zip(net.blocks, out.levels)):
        w = block.w_in
        if np.any(w == 0):
            u = int(np.flatnonzero(w == 0)[0])
            raise MapBackError("level %d split unit %d has zero input weight; threshold undefined" % (k + 1, u))
        if np.any(w < 0):
            u = int(np.flatnonzero(w < 0)[0])
            raise MapBackError("level %d split unit %d has a sign-flipped input weight" % (k + 1, u))
        # a path edge whose sign disagrees with its descent side would invert routing
        sides = {}
        for t, tree in enumerate(forest.trees):
            for leaf, path in tree.leaf_paths().items():
                for n, side in path:
                    sides[(t, leaf, int(n))] = side
        for e in np.flatnonzero(block.path_mask):
            j = block.path_dst[e]
            side = sides.get((int(block.leaf_tree[j]), int(block.leaf_node[j]),
                              int(block.split_node[block.path_src[e]])))
            if side is None or (block.w_path[e] < 0) != (side == "L"):
                raise MapBackError("level %d path weight %d contradicts the tree structure" % (k + 1, e))
        theta = -block.b_in / w
        for u, (t, n) in enumerate(zip(block.split_tree, block.split_node)):
            forest.trees[t].threshold[n] = theta[u]
        for j, (t, leaf) in enumerate(zip(block.leaf_tree, block.leaf_node)):
            forest.trees[t].votes[leaf] = block.w_out[j]
    out.activations = [b.out_kind for b in net.blocks]
    out.signed_votes = True
    out.variant = "mb1"
    return out


@dataclass
class LeafActivationTable:
    """Per-sample leaf-unit activations and per-tree output contributions, per level."""

    image: np.ndarray
    ys: np.ndarray
    xs: np.ndarray
    a2: list[np.ndarray] = field(default_factory=list)  # level -> N x leaf units
    z_tree: list[np.ndarray] = field(default_factory=list)  # level -> N x T x C
    leaves: list[np.ndarray | None] = field(default_factory=list)  # level -> N x T leaf ids

    @property
    def z(self) -> list[np.ndarray]:
        """Level -> N x C sums over trees (the net's pre-activation class scores)."""
        return [zt.sum(axis=1) for zt in self.z_tree]

    def __len__(self):
        return len(self.image)


def _per_tree_z(block, a2: np.ndarray) -> np.ndarray:
    T = block.n_trees
    z = np.zeros((a2.shape[0], T, block.n_classes))
    for t in range(T):
        sel = block.leaf_tree == t
        z[:, t, :] = a2[:, sel] @ block.w_out[sel]
    return z


def training_pixels(train: Sequence, stride: int = 1):
    """``(stack, label map or None)`` pairs -> ``(stacks, image, ys, xs)`` on the stride grid."""
    stacks, img, ys, xs = [], [], [], []
    for i, item in enumerate(train):
        stack, labels = item if isinstance(item, tuple) else (item, None)
        stacks.append(stack)
        h, w = stack.shape[:2]
        gy, gx = np.mgrid[0:h:stride, 0:w:stride]
        gy, gx = gy.ravel(), gx.ravel()
        if labels is not None:
            keep = np.asarray(labels)[gy, gx] >= 0
            gy, gx = gy[keep], gx[keep]
        img.append(np.full(len(gy), i))
        ys.append(gy)
        xs.append(gx)
    return stacks, np.concatenate(img), np.concatenate(ys), np.concatenate(xs)


def compute_z(net: SparseNet, train: Sequence, stride: int = 1) -> LeafActivationTable:
    """Push the training pixels through the net and store leaf-unit activations per level."""
    stacks, img, ys, xs = training_pixels(train, stride)
    table = LeafActivationTable(img, ys, xs)
    per_level = [[] for _ in net.blocks]
    for i, stack in enumerate(stacks):
        sel = img == i
        base = stack.values if isinstance(stack, FeatureStack) else np.asarray(stack)
        w = base.shape[1]
        caches = _forward(net, base)
        flat = ys[sel] * w + xs[sel]
        for k, c in enumerate(caches):
            per_level[k].append(c.a2[flat])
    for k, block in enumerate(net.blocks):
        a2 = np.concatenate(per_level[k], axis=0)
        table.a2.append(a2)
        table.z_tree.append(_per_tree_z(block, a2))
        table.leaves.append(None)
    return table


def eq6_error(z: np.ndarray, yhat: float) -> float:
    """Squared error between a leaf's constant vote and the samples' z values."""
    return float(((np.asarray(z) - yhat) ** 2).sum())


def map_back_2(net: SparseNet, source: ForestStack, train: Sequence, stride: int = 1,
               report: dict | None = None, table: LeafActivationTable | None = None) -> ForestStack:
    """Leaf-vote re-estimation, level by level.

    Leaves that receive no training sample keep their ``map_back_1`` votes.
    """
    rs = map_back_1(net, source)
    if table is None:
        table = compute_z(net, train, stride)
    if len(table) == 0:
        raise MapBackError("no training samples")
    stacks = [item[0] if isinstance(item, tuple) else item for item in train]
    populated = []
    for i in range(rs.n_levels):
        forest = rs.levels[i]
        head = rs.truncated(i)
        leaves = np.zeros((len(table), forest.n_trees), dtype=np.intp)
        for s, stack in enumerate(stacks):
            sel = np.flatnonzero(table.image == s)
            if sel.size == 0:
                continue
            prev = stack_predict_image(head, stack)[0] if i > 0 else None
            values = level_input(stack, prev)
            fetch = _PixelFetcher(values, table.ys[sel], table.xs[sel])
            for t, tree in enumerate(forest.trees):
                leaves[sel, t] = tree.route(fetch)
        table.leaves[i] = leaves
        z = table.z_tree[i]
        n_leaves = n_pop = 0
        for t, tree in enumerate(forest.trees):
            counts = np.bincount(leaves[:, t], minlength=tree.n_nodes)
            sums = np.stack([np.bincount(leaves[:, t], weights=z[:, t, c], minlength=tree.n_nodes)
                             for c in range(forest.n_classes)], axis=1)
            lids = tree.leaf_ids
            hit = lids[counts[lids] > 0]
            tree.votes[hit] = sums[hit] / counts[hit, None]
            n_leaves += len(lids)
            n_pop += len(hit)
        if n_pop == 0:
            raise MapBackError("no training sample reached any leaf of level %d" % (i + 1))
        populated.append(n_pop / n_leaves)
        log.info("level %d: %d/%d leaves re-estimated", i + 1, n_pop, n_leaves)
    rs.variant = "mb2"
    if report is not None:
        report["populated_leaf_fraction"] = populated
        report["samples"] = len(table)
        report["table"] = table
    return rs


class _PixelFetcher(ImageFetcher):
    """Offset lookups restricted to a list of pixels of one image."""

    def __init__(self, values, ys, xs):
        super().__init__(values)
        self.ys = np.asarray(ys)
        self.xs = np.asarray(xs)
        self.n = len(self.ys)

    def __call__(self, idx, channel, dx, dy):
        yy = np.clip(self.ys[idx] + dy, 0, self.h - 1)
        xx = np.clip(self.xs[idx] + dx, 0, self.w - 1)
        return self.values[yy, xx, channel]


def remapped_predict_image(rs: ForestStack, image) -> np.ndarray:
    return stack_predict_image(rs, image)[0]
