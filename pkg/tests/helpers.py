"""Random trees, forests and stacks for property tests and oracles."""

import numpy as np

from forestnet.autocontext import ForestStack
from forestnet.forest import DecisionTree, Forest


def random_tree(rng, n_channels, max_depth, n_classes, max_offset=0, leaf_prob=0.25,
                votes_max=20, threshold_grid=None):
    """Random tree built depth first; leaves get integer vote counts (at least one nonzero)."""
    ch, dx, dy, thr, left, right, votes = [], [], [], [], [], [], []

    def new():
        for a in (ch, dx, dy, thr, left, right):
            a.append(0)
        votes.append(np.zeros(n_classes))
        return len(left) - 1

    def grow(n, depth):
        if depth >= max_depth or (depth > 0 and rng.random() < leaf_prob):
            left[n] = right[n] = ch[n] = -1
            v = rng.integers(0, votes_max + 1, size=n_classes).astype(float)
            v[rng.integers(n_classes)] += 1
            votes[n] = v
            return
        ch[n] = int(rng.integers(n_channels))
        dx[n] = int(rng.integers(-max_offset, max_offset + 1))
        dy[n] = int(rng.integers(-max_offset, max_offset + 1))
        thr[n] = float(rng.uniform(-1, 1)) if threshold_grid is None else float(rng.choice(threshold_grid))
        l = new()
        r = new()
        left[n], right[n] = l, r
        grow(l, depth + 1)
        grow(r, depth + 1)

    root = new()
    grow(root, 0)
    i = lambda a: np.asarray(a, dtype=np.int64)
    return DecisionTree(i(ch), i(dx), i(dy), np.asarray(thr, dtype=np.float64), i(left), i(right),
                        np.asarray(votes, dtype=np.float64), max_depth, root)


def random_forest(rng, n_trees, n_channels, max_depth, n_classes, max_offset=0, **kw):
    trees = [random_tree(rng, n_channels, max_depth, n_classes, max_offset, **kw) for _ in range(n_trees)]
    return Forest(trees, n_classes, n_channels, max_offset)


def random_stack(rng, n_levels, n_trees, max_depth, n_classes, n_base, max_offset=0, **kw):
    levels = []
    for k in range(n_levels):
        n_in = n_base + (n_classes if k else 0)
        f = random_forest(rng, n_trees, n_in, max_depth, n_classes, max_offset, **kw)
        if k:
            # context channels hold probabilities; keep their thresholds inside (0, 1)
            for t in f.trees:
                ctx = (t.channel >= n_base) & (t.left >= 0)
                t.threshold[ctx] = rng.uniform(0.05, 0.95, size=int(ctx.sum()))
        levels.append(f)
    return ForestStack(levels, n_classes, n_base)


def leaf_oracle(tree, x):
    """Leaf whose Eq. 1 path predicate holds, checked leaf by leaf (zero offsets only)."""
    hits = []
    for leaf, path in tree.leaf_paths().items():
        ok = all((x[tree.channel[n]] < tree.threshold[n]) == (side == "L") for n, side in path)
        if ok:
            hits.append(leaf)
    return hits


def routing_margin(stack, values_by_level, ys, xs):
    """Per pixel: smallest |x_f(n) - theta(n)| over all visited splits of every level."""
    from forestnet.mapback import _PixelFetcher
    margin = np.full(len(ys), np.inf)
    for forest, values in zip(stack.levels, values_by_level):
        fetch = _PixelFetcher(values, ys, xs)
        for t in forest.trees:
            node = np.full(len(ys), t.root)
            while True:
                act = np.flatnonzero(t.left[node] >= 0)
                if act.size == 0:
                    break
                cur = node[act]
                v = fetch(act, t.channel[cur], t.dx[cur], t.dy[cur])
                margin[act] = np.minimum(margin[act], np.abs(v - t.threshold[cur]))
                node[act] = np.where(v < t.threshold[cur], t.left[cur], t.right[cur])
    return margin


def fd_check(net, image, labels, loss, eps=1e-4, floor=1e-6):
    """Worst relative error between analytic and central-difference gradients.

    Entries where both are below ``floor`` in magnitude are skipped.
    """
    from forestnet.deepnet import loss_and_grad
    _, grads = loss_and_grad(net, image, labels, loss)
    worst, checked = 0.0, 0
    for key, arr in net.params().items():
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + eps
            lp = loss_and_grad(net, image, labels, loss, need_grad=False)[0]
            arr[i] = old - eps
            lm = loss_and_grad(net, image, labels, loss, need_grad=False)[0]
            arr[i] = old
            fd = (lp - lm) / (2 * eps)
            an = grads[key][i]
            if max(abs(an), abs(fd)) > floor:
                worst = max(worst, abs(an - fd) / max(abs(an), abs(fd)))
                checked += 1
    return worst, checked


def tiny_stack(seed=1, size=6, n_base=3, n_classes=3, n_levels=2):
    """Small trained stack over random images, for gradient and training checks."""
    from forestnet.autocontext import LevelParams, StackConfig, train_stack
    from forestnet.features import FeatureStack
    rng = np.random.default_rng(seed)
    imgs = [rng.normal(size=(size, size, n_base)) for _ in range(3)]
    labs = [rng.integers(0, n_classes, size=(size, size)) for _ in range(3)]
    lp = LevelParams(n_trees=2, max_depth=3, min_samples=2, max_offset=2, samples_per_class=None,
                     n_offsets=3)
    stack = train_stack([FeatureStack(i) for i in imgs], labs,
                        StackConfig(n_levels=n_levels, n_classes=n_classes, levels=[lp], seed=seed))
    return stack, imgs, labs
