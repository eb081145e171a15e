"""Exact construction of a two-hidden-layer sparse net from one forest.

Layout of a block built from a forest with T trees:

* H1: one tanh unit per split node, reading a single (channel, dx, dy) input
  with weight ``str_in`` and bias ``-str_in * threshold``.
* H2: one unit per leaf, connected to the split units on its path with
  ``-str_path`` (left descent) or ``+str_path`` (right descent) and bias
  ``-str_path * (len(path) - 1)``; activation is tanh rescaled to [0, 1].
* output: C units, fully connected from H2 with weights ``str_vote * votes``
  and no bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from . import activations
from .features import OffsetFeatureId
from .forest import Forest, as_fetcher


@dataclass(frozen=True)
class StrengthTriple:
    str_in: float = 100.0
    str_path: float = 1.0
    str_vote: float = 0.1

    def __post_init__(self):
        if min(self.str_in, self.str_path, self.str_vote) <= 0:
            raise ValueError("strength constants must be strictly positive")


# compromise values that keep gradients alive during training
TRAINING_STRENGTHS = StrengthTriple(100.0, 1.0, 0.1)
# saturated values: the block routes exactly like the forest at margins >= 1e-2; a
# power-of-two str_in makes -b/w recover every threshold bit for bit
INFERENCE_STRENGTHS = StrengthTriple(2.0 ** 14, 100.0, 1.0)


@dataclass
class NetBlock:
    n_inputs: int
    n_classes: int
    # H1, one entry per split unit
    in_channel: np.ndarray
    in_dx: np.ndarray
    in_dy: np.ndarray
    w_in: np.ndarray
    b_in: np.ndarray
    split_tree: np.ndarray
    split_node: np.ndarray
    # H1 -> H2 edges (coordinate list) and H2 biases
    path_src: np.ndarray
    path_dst: np.ndarray
    w_path: np.ndarray
    path_mask: np.ndarray
    b_path: np.ndarray
    leaf_tree: np.ndarray
    leaf_node: np.ndarray
    # H2 -> output, dense N2 x C
    w_out: np.ndarray
    out_mask: np.ndarray
    out_kind: str = "softmax"
    strengths: StrengthTriple = field(default_factory=StrengthTriple)

    @property
    def n_split_units(self) -> int:
        return len(self.w_in)

    @property
    def n_leaf_units(self) -> int:
        return len(self.b_path)

    @property
    def n_trees(self) -> int:
        return int(self.leaf_tree.max()) + 1 if len(self.leaf_tree) else 0

    def tree_layout(self):
        """Per tree: ``(split slice, leaf slice, edge ids, local src, local dst)``.

        Units of one tree are contiguous, so the H1 -> H2 layer is block diagonal.
        """
        lay = self.__dict__.get("_layout")
        if lay is None:
            lay = []
            edge_tree = self.leaf_tree[self.path_dst]
            for t in range(self.n_trees):
                s_idx = np.flatnonzero(self.split_tree == t)
                l_idx = np.flatnonzero(self.leaf_tree == t)
                s0 = s_idx[0] if len(s_idx) else 0
                ssl = slice(int(s0), int(s0) + len(s_idx))
                lsl = slice(int(l_idx[0]), int(l_idx[0]) + len(l_idx))
                e = np.flatnonzero(edge_tree == t)
                lay.append((ssl, lsl, e, self.path_src[e] - ssl.start, self.path_dst[e] - lsl.start))
            self.__dict__["_layout"] = lay
        return lay

    def tree_path_weights(self):
        """Dense per-tree H1 -> H2 weight matrices built from the edge list."""
        out = []
        for ssl, lsl, e, src, dst in self.tree_layout():
            m = np.zeros((ssl.stop - ssl.start, lsl.stop - lsl.start))
            m[src, dst] = self.w_path[e]
            out.append(m)
        return out

    def path_matrix(self) -> sparse.csr_matrix:
        return sparse.csr_matrix((self.w_path, (self.path_src, self.path_dst)),
                                 shape=(self.n_split_units, self.n_leaf_units))

    def copy(self) -> "NetBlock":
        out = replace(self, **{k: v.copy() for k, v in self.__dict__.items()
                               if isinstance(v, np.ndarray)})
        if "_layout" in self.__dict__:
            out.__dict__["_layout"] = self.__dict__["_layout"]
        return out


def map_forest_to_block(forest: Forest, strengths: StrengthTriple = TRAINING_STRENGTHS,
                        out_kind: str = "softmax", normalize_leaf_votes: bool = False,
                        dense_paths: bool = False) -> NetBlock:
    """Build the block for ``forest``.

    ``normalize_leaf_votes`` maps per-leaf vote distributions instead of raw
    counts. ``dense_paths`` adds zero-valued edges between every split and leaf
    unit of the same tree; those edges are outside ``path_mask``.
    """
    if not forest.trees:
        raise ValueError("cannot map an empty forest")
    s = strengths
    ch, dx, dy, split_tree, split_node = [], [], [], [], []
    thr = []
    src, dst, wp, mask = [], [], [], []
    b_path, leaf_tree, leaf_node, votes = [], [], [], []
    for t, tree in enumerate(forest.trees):
        unit_of = {}
        for n in tree.split_ids:
            unit_of[int(n)] = len(ch)
            ch.append(tree.channel[n])
            dx.append(tree.dx[n])
            dy.append(tree.dy[n])
            thr.append(tree.threshold[n])
            split_tree.append(t)
            split_node.append(n)
        tree_units = list(unit_of.values())
        for leaf, path in sorted(tree.leaf_paths().items()):
            j = len(b_path)
            on_path = {}
            for n, side in path:
                on_path[unit_of[n]] = -s.str_path if side == "L" else s.str_path
            others = [u for u in tree_units if u not in on_path] if dense_paths else []
            for u, w in on_path.items():
                src.append(u)
                dst.append(j)
                wp.append(w)
                mask.append(True)
            for u in others:
                src.append(u)
                dst.append(j)
                wp.append(0.0)
                mask.append(False)
            b_path.append(-s.str_path * (len(path) - 1))
            leaf_tree.append(t)
            leaf_node.append(leaf)
            v = tree.votes[leaf].astype(np.float64)
            if normalize_leaf_votes:
                tot = v.sum()
                v = v / tot if tot != 0 else np.full_like(v, 1.0 / len(v))
            votes.append(v)
    thr = np.asarray(thr, dtype=np.float64)
    w_in = np.full(len(ch), float(s.str_in))
    w_out = s.str_vote * np.asarray(votes, dtype=np.float64).reshape(-1, forest.n_classes)
    i64 = lambda a: np.asarray(a, dtype=np.int64)
    return NetBlock(
        n_inputs=forest.n_channels, n_classes=forest.n_classes,
        in_channel=i64(ch), in_dx=i64(dx), in_dy=i64(dy), w_in=w_in, b_in=-s.str_in * thr,
        split_tree=i64(split_tree), split_node=i64(split_node),
        path_src=i64(src), path_dst=i64(dst), w_path=np.asarray(wp, dtype=np.float64),
        path_mask=np.asarray(mask, dtype=bool), b_path=np.asarray(b_path, dtype=np.float64),
        leaf_tree=i64(leaf_tree), leaf_node=i64(leaf_node),
        w_out=w_out, out_mask=w_out != 0, out_kind=out_kind, strengths=s)


def path_forward(block: NetBlock, a1: np.ndarray, weights=None) -> np.ndarray:
    """H2 pre-activation from H1 activations, one dense matmul per tree."""
    weights = weights if weights is not None else block.tree_path_weights()
    z2 = np.empty((a1.shape[0], block.n_leaf_units))
    for (ssl, lsl, *_), m in zip(block.tree_layout(), weights):
        z2[:, lsl] = a1[:, ssl] @ m
    z2 += block.b_path
    return z2


def block_layers(block: NetBlock, inputs: np.ndarray):
    """Forward ``n x N1`` per-unit inputs; returns ``(a1, a2, v, out)``.

    ``v`` is the output pre-activation; ``out`` is ``block.out_kind`` applied to it.
    """
    a1 = np.tanh(inputs * block.w_in + block.b_in)
    a2 = activations.tanh01(path_forward(block, a1))
    v = a2 @ block.w_out
    out, _ = activations.apply(block.out_kind, v)
    return a1, a2, v, out


def block_forward(block: NetBlock, x, return_hidden: bool = False):
    """Class scores for one sample given as an accessor, ``(stack, (x, y))`` or vector."""
    get = as_fetcher(x)
    u = np.array([[get(OffsetFeatureId(int(c), int(a), int(b)))
                   for c, a, b in zip(block.in_channel, block.in_dx, block.in_dy)]])
    a1, a2, v, out = block_layers(block, u.reshape(1, -1))
    if return_hidden:
        return out[0], a1[0], a2[0]
    return out[0]


def sparsity_counts(block: NetBlock) -> dict:
    return {"input_weights": int(np.count_nonzero(block.w_in)),
            "path_weights": int(np.count_nonzero(block.w_path[block.path_mask])),
            "split_units": block.n_split_units, "leaf_units": block.n_leaf_units}
