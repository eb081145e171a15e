"""Deep sparse net built from a forest stack: whole-image forward, backprop and SGD.

A K-level stack becomes 3K - 1 hidden layers plus the output layer. Level k
(1-based) owns layers H{3k-2} (split units), H{3k-1} (leaf units) and H{3k}
(class units; the output layer when k == K). Level k > 1 reads the original
filter channels as fixed pass-through taps together with the class units of
level k - 1, both at arbitrary pixel offsets.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from . import activations
from .activations import tanh01
from .autocontext import ForestStack
from .features import FeatureStack
from .rf2nn import NetBlock, StrengthTriple, TRAINING_STRENGTHS, map_forest_to_block, path_forward

log = logging.getLogger(__name__)

NET_MAGIC = b"FNET"
NET_VERSION = 1
PARAMS = ("w_in", "b_in", "w_path", "b_path", "w_out")
IGNORE = -1


class NumericalError(ArithmeticError):
    def __init__(self, layer: str, pixel: tuple[int, int] | None, msg: str = "non-finite activation"):
        self.layer = layer
        self.pixel = pixel
        super().__init__("%s in layer %s at pixel %s" % (msg, layer, pixel))


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; ``net`` holds the last finite state."""

    def __init__(self, iteration: int, net: "SparseNet", curve: list):
        self.iteration = iteration
        self.net = net
        self.curve = curve
        super().__init__("training diverged at iteration %d" % iteration)


@dataclass
class SparseNet:
    blocks: list[NetBlock]
    n_classes: int
    n_base_channels: int
    guard_events: int = field(default=0, compare=False)

    @property
    def n_levels(self) -> int:
        return len(self.blocks)

    @property
    def n_hidden_layers(self) -> int:
        return 3 * self.n_levels - 1

    def layer_names(self) -> list[str]:
        return ["H%d" % i for i in range(1, 3 * self.n_levels)] + ["out"]

    def layer_index(self, name: str) -> tuple[int, int]:
        """``name`` -> (level index, position 0/1/2 within the level)."""
        if name == "out":
            return self.n_levels - 1, 2
        i = int(name.lstrip("Hh"))
        if not 1 <= i <= 3 * self.n_levels - 1:
            raise KeyError("no layer %s in a %d-level net" % (name, self.n_levels))
        return (i - 1) // 3, (i - 1) % 3

    def prediction_layers(self) -> list[str]:
        """Names of the class-unit layers H3, H6, ... (excluding the output)."""
        return ["H%d" % (3 * k) for k in range(1, self.n_levels)]

    def copy(self) -> "SparseNet":
        return SparseNet([b.copy() for b in self.blocks], self.n_classes, self.n_base_channels,
                         self.guard_events)

    def params(self) -> dict:
        return {(k, p): getattr(b, p) for k, b in enumerate(self.blocks) for p in PARAMS}

    def layer_params(self, names: Iterable[str]) -> set:
        """Parameter keys holding the incoming weights and biases of layers ``names``."""
        out = set()
        for name in names:
            k, pos = self.layer_index(name)
            out |= {(k, p) for p in (("w_in", "b_in"), ("w_path", "b_path"), ("w_out",))[pos]}
        return out

    def structure_layers(self) -> list[str]:
        """Leaf-unit layers H2, H5, ... whose weights and biases encode the tree topology."""
        return ["H%d" % (3 * k - 1) for k in range(1, self.n_levels + 1)]


def map_stack_to_net(stack: ForestStack, strengths: StrengthTriple | Sequence[StrengthTriple] = TRAINING_STRENGTHS,
                     intermediate: str = "classnorm", normalize_leaf_votes: bool = False,
                     dense_paths: bool = False) -> SparseNet:
    if isinstance(strengths, StrengthTriple):
        strengths = [strengths] * stack.n_levels
    blocks = []
    for k, forest in enumerate(stack.levels):
        kind = "softmax" if k == stack.n_levels - 1 else intermediate
        blocks.append(map_forest_to_block(forest, strengths[k], kind, normalize_leaf_votes, dense_paths))
    return SparseNet(blocks, stack.n_classes, stack.n_base_channels)


# ---------------------------------------------------------------------------
# forward / backward


def _padded_input(x: np.ndarray, pad: int) -> np.ndarray:
    """Edge-padded flat copy, so clamped offset lookups become plain index arithmetic."""
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    return np.ascontiguousarray(x, dtype=np.float64).ravel()


def _gather_index(w_pad, n_in, pad, qy, qx, block: NetBlock) -> np.ndarray:
    base = ((qy + pad) * w_pad + (qx + pad)) * n_in
    off = (block.in_dy * w_pad + block.in_dx) * n_in + block.in_channel
    idx = base[:, None] + off[None, :]
    return idx.astype(np.int32) if idx.size and idx.max() < 2**31 else idx


def _fold_padding(g: np.ndarray, pad: int) -> np.ndarray:
    """Adjoint of edge padding: border rows/columns collect the gradient of their copies."""
    if not pad:
        return g
    rows = g[pad:-pad].copy()
    rows[0] += g[:pad].sum(axis=0)
    rows[-1] += g[-pad:].sum(axis=0)
    out = rows[:, pad:-pad].copy()
    out[:, 0] += rows[:, :pad].sum(axis=1)
    out[:, -1] += rows[:, -pad:].sum(axis=1)
    return out


def _check_finite(arr, layer, qy, qx):
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr.reshape(len(qy), -1)))[0, 0]
        raise NumericalError(layer, (int(qx[bad]), int(qy[bad])))


@dataclass
class _LevelCache:
    shape: tuple  # padded (H, W, n_in)
    pad: int
    idx: np.ndarray
    u: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    path_weights: list
    out: np.ndarray
    vsum: np.ndarray
    guarded: np.ndarray | None


def _forward(net: SparseNet, base: np.ndarray, qy=None, qx=None):
    """Forward pass. All levels but the last run on every pixel; the last runs on ``(qy, qx)``."""
    h, w, F = base.shape
    if F != net.n_base_channels:
        raise ValueError("stack has %d channels, net expects %d" % (F, net.n_base_channels))
    ally, allx = np.divmod(np.arange(h * w), w)
    caches = []
    prev = None
    for k, block in enumerate(net.blocks):
        last = k == net.n_levels - 1
        ky, kx = (qy, qx) if last and qy is not None else (ally, allx)
        x = base if prev is None else np.concatenate([base, prev.reshape(h, w, -1)], axis=2)
        pad = int(max(np.abs(block.in_dx).max(initial=0), np.abs(block.in_dy).max(initial=0)))
        flat = _padded_input(x, pad)
        idx = _gather_index(w + 2 * pad, block.n_inputs, pad, ky, kx, block)
        u = flat[idx]
        a1 = np.tanh(u * block.w_in + block.b_in)
        _check_finite(a1, "H%d" % (3 * k + 1), ky, kx)
        pw = block.tree_path_weights()
        a2 = tanh01(path_forward(block, a1, pw))
        _check_finite(a2, "H%d" % (3 * k + 2), ky, kx)
        v = a2 @ block.w_out
        out, guarded = activations.apply(block.out_kind, v)
        name = "out" if last else "H%d" % (3 * k + 3)
        _check_finite(out, name, ky, kx)
        if guarded is not None and guarded.any():
            net.guard_events += int(guarded.sum())
            log.debug("class normalization guarded at %d pixels of %s", int(guarded.sum()), name)
        caches.append(_LevelCache((h + 2 * pad, w + 2 * pad, block.n_inputs), pad, idx, u, a1, a2,
                                  pw, out, v.sum(axis=1), guarded))
        prev = out
    return caches


def net_forward_image(net: SparseNet, stack: FeatureStack | np.ndarray, capture: Iterable[str] = ()):
    """Whole-image pass. Returns ``(H x W x C output maps, snapshot)``.

    ``snapshot`` maps each captured layer name to an H x W x units array.
    """
    base = stack.values if isinstance(stack, FeatureStack) else np.asarray(stack)
    h, w = base.shape[:2]
    caches = _forward(net, base)
    snapshot = {}
    for name in capture:
        k, pos = net.layer_index(name)
        arr = (caches[k].a1, caches[k].a2, caches[k].out)[pos]
        snapshot[name] = arr.reshape(h, w, -1).copy()
    return caches[-1].out.reshape(h, w, net.n_classes), snapshot


def class_weights(labels: np.ndarray, n_classes: int, balanced: bool) -> np.ndarray:
    """Per-pixel loss weights: 1, or inverse class frequency scaled to average 1."""
    labels = np.asarray(labels)
    valid = labels >= 0
    wts = np.zeros(labels.shape)
    if not balanced:
        wts[valid] = 1.0
        return wts
    counts = np.bincount(labels[valid], minlength=n_classes).astype(np.float64)
    present = np.count_nonzero(counts)
    per_class = np.divide(valid.sum(), present * counts, out=np.zeros(n_classes), where=counts > 0)
    wts[valid] = per_class[labels[valid]]
    return wts


def _classnorm_backward(out, vsum, guarded, g):
    dv = (g - (g * out).sum(axis=1, keepdims=True)) / np.where(guarded, 1.0, vsum)[:, None]
    dv[guarded] = 0.0
    return dv


def _output_backward(block: NetBlock, cache: _LevelCache, g: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the output pre-activation given the gradient w.r.t. its activation."""
    out = cache.out
    if block.out_kind == "softmax":
        return out * (g - (g * out).sum(axis=1, keepdims=True))
    if block.out_kind == "classnorm":
        return _classnorm_backward(out, cache.vsum, cache.guarded, g)
    return g


def _level_backward(block: NetBlock, cache: _LevelCache, dv: np.ndarray, grads: dict, k: int,
                    need_input: bool):
    grads[(k, "w_out")] = cache.a2.T @ dv
    dz2 = (dv @ block.w_out.T) * (2.0 * cache.a2 * (1.0 - cache.a2))
    grads[(k, "b_path")] = dz2.sum(axis=0)
    gw = np.zeros(len(block.w_path))
    da1 = np.empty_like(cache.a1)
    for (ssl, lsl, e, src, dst), m in zip(block.tree_layout(), cache.path_weights):
        a1_t = cache.a1[:, ssl]
        dz2_t = dz2[:, lsl]
        gw[e] = (a1_t.T @ dz2_t)[src, dst]
        da1[:, ssl] = dz2_t @ m.T
    grads[(k, "w_path")] = gw
    dz1 = da1 * (1.0 - cache.a1 * cache.a1)
    grads[(k, "w_in")] = (dz1 * cache.u).sum(axis=0)
    grads[(k, "b_in")] = dz1.sum(axis=0)
    if not need_input:
        return None
    g = np.bincount(cache.idx.ravel(), weights=(dz1 * block.w_in).ravel(),
                    minlength=int(np.prod(cache.shape)))
    g = _fold_padding(g.reshape(cache.shape), cache.pad)
    return g.reshape(-1, block.n_inputs)


def loss_and_grad(net: SparseNet, stack, labels: np.ndarray, loss: str = "ce",
                  stride: int = 1, offset: tuple[int, int] = (0, 0), need_grad: bool = True):
    """Mean (optionally class-balanced) cross-entropy over labelled pixels and its gradient.

    Only pixels on the ``stride`` grid starting at ``offset = (oy, ox)`` contribute.
    Returns ``(loss, grads)``; ``grads`` maps ``(level, param)`` to arrays.
    """
    base = stack.values if isinstance(stack, FeatureStack) else np.asarray(stack)
    h, w = base.shape[:2]
    labels = np.asarray(labels)
    oy, ox = offset
    sub = labels[oy::stride, ox::stride]
    ly, lx = np.nonzero(sub >= 0)
    if loss not in ("ce", "balanced_ce"):
        raise ValueError("unknown loss %r" % loss)
    if len(ly) == 0:
        log.warning("no labelled pixels; returning zero gradient")
        return 0.0, {key: np.zeros_like(v) for key, v in net.params().items()}
    qy = ly * stride + oy
    qx = lx * stride + ox
    y = labels[qy, qx]
    wts = class_weights(y, net.n_classes, loss == "balanced_ce")
    caches = _forward(net, base, qy, qx)
    out = caches[-1].out
    n = len(y)
    p_true = out[np.arange(n), y]
    with np.errstate(divide="ignore"):
        value = float(-(wts * np.log(p_true)).sum() / n)
    if not need_grad:
        return value, None
    grads = {}
    last = net.blocks[-1]
    if last.out_kind == "softmax":
        dv = out.copy()
        dv[np.arange(n), y] -= 1.0
        dv *= (wts / n)[:, None]
    else:
        g = np.zeros_like(out)
        g[np.arange(n), y] = -wts / (n * p_true)
        dv = _output_backward(last, caches[-1], g)
    for k in range(net.n_levels - 1, -1, -1):
        block = net.blocks[k]
        dx = _level_backward(block, caches[k], dv, grads, k, need_input=k > 0)
        if k > 0:
            g_prev = dx[:, net.n_base_channels:]
            dv = _output_backward(net.blocks[k - 1], caches[k - 1], g_prev)
    return value, grads


def backward(net: SparseNet, stack, labels, loss: str = "ce", stride: int = 1):
    """Gradient set for one image (batch of one), averaged over its labelled pixels."""
    return loss_and_grad(net, stack, labels, loss, stride)[1]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    loss: str = "ce"
    lr_a: float = 0.01
    lr_b: float = 400.0
    momentum: str = "sutskever"  # or "step"
    mu_max: float = 0.95
    mu_start: float = 0.4
    mu_end: float = 0.7
    mu_step: int = 96
    iterations: int = 100
    stride: int = 5
    seed: int = 0
    sparse: bool = True
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.lr_a <= 0 or self.lr_b <= 0:
            raise ValueError("learning-rate parameters a and b must be positive")
        if self.momentum not in ("sutskever", "step"):
            raise ValueError("momentum schedule must be 'sutskever' or 'step'")
        for mu in (self.mu_max, self.mu_start, self.mu_end):
            if not 0 <= mu < 1:
                raise ValueError("momentum must lie in [0, 1)")
        if self.loss not in ("ce", "balanced_ce"):
            raise ValueError("loss must be 'ce' or 'balanced_ce'")


def learning_rate(i: int, a: float, b: float) -> float:
    return a / (1.0 + i / b)


def momentum_at(i: int, config: TrainConfig) -> float:
    if config.momentum == "sutskever":
        return min(config.mu_max, 1.0 - 3.0 / (i + 5.0))
    return config.mu_start if i < config.mu_step else config.mu_end


def trainable_masks(net: SparseNet, sparse: bool, frozen: Iterable[str] = ()) -> dict:
    """Per-parameter boolean masks of entries SGD may change."""
    frozen_keys = net.layer_params(frozen)
    masks = {}
    for (k, p), arr in net.params().items():
        if (k, p) in frozen_keys:
            masks[(k, p)] = np.zeros(arr.shape, dtype=bool)
        elif sparse and p == "w_path":
            masks[(k, p)] = net.blocks[k].path_mask.copy()
        elif sparse and p == "w_out":
            masks[(k, p)] = net.blocks[k].out_mask.copy()
        else:
            masks[(k, p)] = np.ones(arr.shape, dtype=bool)
    return masks


def train_sgd(net: SparseNet, dataset: Sequence[tuple], config: TrainConfig,
              frozen: Iterable[str] = (), callback=None):
    """SGD with momentum, one image per step.

    ``dataset`` holds ``(stack, label map)`` pairs. Returns ``(trained net, curve)``
    where ``curve`` rows are ``(iteration, lr, momentum, loss)``. The input net is
    not modified.
    """
    if not dataset:
        raise ValueError("empty training set")
    net = net.copy()
    masks = trainable_masks(net, config.sparse, frozen)
    velocity = {key: np.zeros_like(v) for key, v in net.params().items()}
    rng = np.random.default_rng(config.seed)
    order = []
    curve = []
    last_good = net.copy()
    for i in range(config.iterations):
        if not order:
            order = list(rng.permutation(len(dataset)))
        stack, labels = dataset[order.pop()]
        off = tuple(int(o) for o in rng.integers(0, config.stride, size=2))
        lr = learning_rate(i, config.lr_a, config.lr_b)
        mu = momentum_at(i, config)
        try:
            value, grads = loss_and_grad(net, stack, labels, config.loss, config.stride, off)
        except NumericalError as exc:
            log.error("numerical failure at iteration %d: %s", i, exc)
            raise TrainingDiverged(i, last_good, curve) from exc
        if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(i, last_good, curve)
        curve.append((i, lr, mu, value))
        last_good = net.copy()
        for key, g in grads.items():
            m = masks[key]
            if not m.any():
                continue
            vel = velocity[key]
            vel *= mu
            vel -= lr * np.where(m, g, 0.0)
            param = getattr(net.blocks[key[0]], key[1])
            param[m] += vel[m]
        if callback is not None:
            callback(i, net, value)
        if config.checkpoint_every and config.checkpoint_path and (i + 1) % config.checkpoint_every == 0:
            save_net(config.checkpoint_path % (i + 1) if "%" in config.checkpoint_path
                     else config.checkpoint_path, net)
    return net, curve


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "lr", "momentum", "loss"])
        for i, lr, mu, loss in curve:
            wr.writerow([i, repr(lr), repr(mu), repr(loss)])


def randomize(net: SparseNet, sigma: float = 0.01, seed=0) -> SparseNet:
    """Copy of ``net`` with Gaussian weights on every stored edge (structure kept)."""
    rng = np.random.default_rng(seed)
    out = net.copy()
    for b in out.blocks:
        for p in ("w_in", "w_path", "w_out"):
            arr = getattr(b, p)
            arr[...] = rng.normal(0.0, sigma, arr.shape)
        b.out_mask[...] = True
        b.path_mask[...] = True
    return out


# ---------------------------------------------------------------------------
# persistence: magic, JSON header, little-endian binary payload


_INT_FIELDS = ("in_channel", "in_dx", "in_dy", "split_tree", "split_node", "leaf_tree", "leaf_node")


def save_net(path, net: SparseNet) -> None:
    payload = bytearray()
    layers = []

    def put(arr, dtype):
        start = len(payload)
        payload.extend(np.ascontiguousarray(arr, dtype=dtype).tobytes())
        return [start, len(arr)]

    for k, b in enumerate(net.blocks):
        rows_out, cols_out = np.nonzero(np.ones_like(b.w_out, dtype=bool))
        rec = {
            "level": k + 1, "n_inputs": b.n_inputs, "out_kind": b.out_kind,
            "strengths": [b.strengths.str_in, b.strengths.str_path, b.strengths.str_vote],
            "n_split_units": b.n_split_units, "n_leaf_units": b.n_leaf_units,
            "names": {"split": "H%d" % (3 * k + 1), "leaf": "H%d" % (3 * k + 2),
                      "class": "out" if k == net.n_levels - 1 else "H%d" % (3 * k + 3)},
            "ints": {f: put(getattr(b, f), "<i8") for f in _INT_FIELDS},
            # weight layers as coordinate triples (src, dst, value)
            "input": [put(b.in_channel, "<i8"), put(np.arange(b.n_split_units), "<i8"), put(b.w_in, "<f8")],
            "path": [put(b.path_src, "<i8"), put(b.path_dst, "<i8"), put(b.w_path, "<f8")],
            "vote": [put(rows_out, "<i8"), put(cols_out, "<i8"), put(b.w_out.ravel(), "<f8")],
            "b_in": put(b.b_in, "<f8"), "b_path": put(b.b_path, "<f8"),
            "path_mask": put(b.path_mask, "<u1"), "out_mask": put(b.out_mask.ravel(), "<u1"),
        }
        layers.append(rec)
    header = {"format": "forestnet.sparsenet", "version": NET_VERSION,
              "n_levels": net.n_levels, "n_classes": net.n_classes,
              "n_base_channels": net.n_base_channels, "hidden_layers": net.n_hidden_layers,
              "prediction_layers": net.prediction_layers(), "pass_through_channels": net.n_base_channels,
              "levels": layers}
    raw = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(NET_MAGIC)
        fh.write(struct.pack("<HQ", NET_VERSION, len(raw)))
        fh.write(raw)
        fh.write(bytes(payload))


def load_net(path) -> SparseNet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != NET_MAGIC:
        raise ValueError("%s is not a sparse-net file" % path)
    version, n = struct.unpack_from("<HQ", data, 4)
    if version != NET_VERSION:
        raise ValueError("unsupported net version %d" % version)
    start = 4 + struct.calcsize("<HQ")
    header = json.loads(data[start:start + n].decode("utf-8"))
    payload = memoryview(data)[start + n:]

    def get(ref, dtype):
        off, count = ref
        return np.frombuffer(payload, dtype, count, off).copy()

    C = header["n_classes"]
    blocks = []
    for rec in header["levels"]:
        ints = {f: get(rec["ints"][f], "<i8") for f in _INT_FIELDS}
        n2 = rec["n_leaf_units"]
        w_out = np.zeros((n2, C))
        r, c, v = (get(rec["vote"][0], "<i8"), get(rec["vote"][1], "<i8"), get(rec["vote"][2], "<f8"))
        w_out[r, c] = v
        blocks.append(NetBlock(
            n_inputs=rec["n_inputs"], n_classes=C,
            in_channel=ints["in_channel"], in_dx=ints["in_dx"], in_dy=ints["in_dy"],
            w_in=get(rec["input"][2], "<f8"), b_in=get(rec["b_in"], "<f8"),
            split_tree=ints["split_tree"], split_node=ints["split_node"],
            path_src=get(rec["path"][0], "<i8"), path_dst=get(rec["path"][1], "<i8"),
            w_path=get(rec["path"][2], "<f8"), path_mask=get(rec["path_mask"], "<u1").astype(bool),
            b_path=get(rec["b_path"], "<f8"), leaf_tree=ints["leaf_tree"], leaf_node=ints["leaf_node"],
            w_out=w_out, out_mask=get(rec["out_mask"], "<u1").astype(bool).reshape(n2, C),
            out_kind=rec["out_kind"], strengths=StrengthTriple(*rec["strengths"])))
    return SparseNet(blocks, C, header["n_base_channels"])


def nets_equal(a: SparseNet, b: SparseNet) -> bool:
    if (a.n_classes, a.n_base_channels, a.n_levels) != (b.n_classes, b.n_base_channels, b.n_levels):
        return False
    for x, y in zip(a.blocks, b.blocks):
        for f in fields(x):
            v, o = getattr(x, f.name), getattr(y, f.name)
            if isinstance(v, np.ndarray):
                if v.shape != o.shape or not np.array_equal(v, o):
                    return False
            elif v != o:
                return False
    return True


# ---------------------------------------------------------------------------
# activation images


def export_activation_images(snapshot: dict, layer: str, classes: Iterable[int] | None, out_dir,
                             prefix: str = "") -> list[str]:
    """Write min-max normalized 8-bit PNGs of captured maps, plus a ``.txt`` scale sidecar each."""
    import os
    from PIL import Image

    if layer not in snapshot:
        raise KeyError("layer %s was not captured" % layer)
    maps = snapshot[layer]
    os.makedirs(out_dir, exist_ok=True)
    if classes is None:
        classes = range(maps.shape[2])
    written = []
    for c in classes:
        m = maps[:, :, c]
        lo, hi = float(m.min()), float(m.max())
        if hi > lo:
            img = np.round((m - lo) / (hi - lo) * 255.0)
        else:
            img = np.full(m.shape, 128.0)
        stem = os.path.join(out_dir, "%s%s_c%d" % (prefix, layer, c))
        Image.fromarray(img.astype(np.uint8), mode="L").save(stem + ".png")
        with open(stem + ".txt", "w") as fh:
            fh.write("min %r\nmax %r\n" % (lo, hi))
        written.append(stem + ".png")
    return written


def read_activation_image(png_path) -> np.ndarray:
    """Inverse of :func:`export_activation_images` up to 8-bit quantization."""
    from PIL import Image

    img = np.asarray(Image.open(png_path), dtype=np.float64)
    with open(png_path[:-4] + ".txt") as fh:
        vals = dict(line.split() for line in fh if line.strip())
    lo, hi = float(vals["min"]), float(vals["max"])
    if hi == lo:
        return np.full(img.shape, lo)
    return lo + img / 255.0 * (hi - lo)
