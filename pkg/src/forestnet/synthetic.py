"""Synthetic segmentation tasks standing in for real microscopy data.

``bands``: an elongated body split into C - 1 look-alike segments along its long
axis (segment boundaries are thin dark lines) on a darker background. Which
segment a pixel belongs to can only be told from context: its distance to the
body's ends. ``blobs``: a few discs whose class is set by their size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class SyntheticTask:
    generator: str = "bands"
    size: int = 128
    n_classes: int = 6
    noise: float = 0.08
    n_train: int = 20
    n_test: int = 10
    seed: int = 0


def _bands(rng, size, n_classes, noise):
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = size / 2 + rng.uniform(-0.06, 0.06) * size
    cx = size / 2 + rng.uniform(-0.06, 0.06) * size
    a = rng.uniform(0.34, 0.42) * size
    b = rng.uniform(0.12, 0.16) * size
    ang = rng.uniform(-0.2, 0.2)
    u = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
    v = -(xx - cx) * np.sin(ang) + (yy - cy) * np.cos(ang)
    # slightly tapered body
    half_height = b * (1.0 - 0.25 * (u / a))
    body = (u / a) ** 2 + (v / half_height) ** 2 < 1.0
    n_seg = n_classes - 1
    frac = (u + a) / (2 * a)
    wobble = 0.015 * np.sin(v / b * np.pi + rng.uniform(0, 2 * np.pi))
    pos = np.clip((frac + wobble) * n_seg, 0, n_seg - 1e-9)
    seg = np.floor(pos).astype(np.int64)
    labels = np.where(body, seg + 1, 0)

    edge_dist = np.minimum(pos - seg, seg + 1 - pos) * (2 * a / n_seg)
    boundary = body & (edge_dist < 1.2) & (pos > 0.2) & (pos < n_seg - 0.2)
    img = np.where(body, 0.6, 0.25)
    img = img - 0.3 * boundary
    img = img + 0.05 * np.where(body, np.cos(2 * np.pi * v / (1.2 * b)), 0.0)
    illum = ndimage.gaussian_filter(rng.normal(0, 1, (h, w)), size / 8)
    illum = 0.08 * illum / (np.abs(illum).max() + 1e-12)
    img = img + illum + rng.normal(0, noise, (h, w))
    img = ndimage.gaussian_filter(img, 0.7)
    return img, labels


def _blobs(rng, size, n_classes, noise):
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.zeros((h, w), dtype=np.int64)
    img = np.full((h, w), 0.2)
    for c in range(1, n_classes):
        r = 4 + 3 * c
        cy, cx = rng.uniform(r, size - r, size=2)
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        labels[disc] = c
        img[disc] = 0.7
    img = img + rng.normal(0, noise, (h, w))
    return ndimage.gaussian_filter(img, 0.7), labels


_GENERATORS = {"bands": _bands, "blobs": _blobs}


def generate(task: SyntheticTask):
    """Returns ``(train, test)`` lists of ``(image, label map)`` pairs."""
    if task.generator not in _GENERATORS:
        raise ValueError("unknown generator %r" % task.generator)
    if task.n_classes < 2:
        raise ValueError("need at least two classes")
    gen = _GENERATORS[task.generator]
    seeds = np.random.SeedSequence(task.seed).spawn(task.n_train + task.n_test)
    pairs = []
    for s in seeds:
        rng = np.random.default_rng(s)
        for _ in range(100):
            img, lab = gen(rng, task.size, task.n_classes, task.noise)
            if len(np.unique(lab)) == task.n_classes:
                break
        pairs.append((img, lab))
    return pairs[:task.n_train], pairs[task.n_train:]
