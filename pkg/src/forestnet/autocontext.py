"""Auto-context stacks: level k reads the filter stack plus level k-1's class maps."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import activations
from .features import FeatureStack
from .forest import (Forest, SampleSet, SchemaError, TreeParams, forest_from_dict,
                     forest_to_dict, forest_votes_image, train_forest)

log = logging.getLogger(__name__)

STACK_FORMAT = "forestnet.stack"
STACK_VERSION = 1
IGNORE = -1


@dataclass
class LevelParams:
    """Forest and pixel-sampling settings for one stack level."""

    n_trees: int = 16
    max_depth: int = 12
    min_samples: int = 25
    n_channels: int | None = None
    n_offsets: int = 10
    n_thresholds: int = 20
    max_offset: int = 64
    samples_per_class: int | None = 20
    sample_stride: int = 1
    sample_fraction: float | None = None

    def tree_params(self, n_classes: int) -> TreeParams:
        return TreeParams(n_classes, self.max_depth, self.min_samples, self.n_channels,
                          self.n_offsets, self.n_thresholds, self.max_offset)


@dataclass
class StackConfig:
    n_levels: int = 2
    n_classes: int = 2
    levels: list[LevelParams] = field(default_factory=lambda: [LevelParams()])
    seed: int = 0
    n_jobs: int = 1

    def level(self, k: int) -> LevelParams:
        return self.levels[min(k, len(self.levels) - 1)]


@dataclass
class ForestStack:
    """K forests plus the activation applied to each level's summed votes.

    Plain stacks use class normalization everywhere (the forest's own vote
    normalization). Stacks mapped back from a trained net use class
    normalization between levels and softmax on the last one, and may hold
    signed votes.
    """

    levels: list[Forest]
    n_classes: int
    n_base_channels: int
    activations: list[str] = field(default_factory=list)
    signed_votes: bool = False
    variant: str = "rf"

    def __post_init__(self):
        if not self.activations:
            self.activations = ["classnorm"] * len(self.levels)
        if len(self.activations) != len(self.levels):
            raise SchemaError("one activation per level required")
        for k, f in enumerate(self.levels):
            want = self.n_base_channels + (self.n_classes if k > 0 else 0)
            if f.n_channels != want:
                raise SchemaError("level %d reads %d channels, expected %d" % (k + 1, f.n_channels, want))
            if f.n_classes != self.n_classes:
                raise SchemaError("level %d has %d classes, expected %d" % (k + 1, f.n_classes, self.n_classes))

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def truncated(self, k: int) -> "ForestStack":
        return replace(self, levels=self.levels[:k], activations=self.activations[:k])

    def copy(self) -> "ForestStack":
        return replace(self, levels=[f.copy() for f in self.levels], activations=list(self.activations))


def level_input(base: FeatureStack | np.ndarray, prev_maps: np.ndarray | None) -> np.ndarray:
    v = base.values if isinstance(base, FeatureStack) else np.asarray(base)
    if prev_maps is None:
        return v
    return np.concatenate([v, prev_maps], axis=2)


def sample_pixels(label_maps: Sequence[np.ndarray], n_classes: int, params: LevelParams, rng):
    """Balanced pixel sampling on a strided grid; returns ``(image, ys, xs, labels)``."""
    img_l, ys_l, xs_l, lab_l = [], [], [], []
    s = max(1, params.sample_stride)
    for i, lab in enumerate(label_maps):
        oy, ox = rng.integers(0, s, size=2) if s > 1 else (0, 0)
        grid = np.asarray(lab)[oy::s, ox::s]
        yy, xx = np.nonzero(grid >= 0)
        labels = grid[yy, xx]
        yy = yy * s + oy
        xx = xx * s + ox
        if params.sample_fraction is not None:
            keep = rng.random(len(labels)) < params.sample_fraction
            pick = np.flatnonzero(keep)
        elif params.samples_per_class is not None:
            pick = []
            for c in range(n_classes):
                cand = np.flatnonzero(labels == c)
                if len(cand):
                    pick.append(rng.choice(cand, size=min(len(cand), params.samples_per_class), replace=False))
            pick = np.sort(np.concatenate(pick)) if pick else np.zeros(0, dtype=np.intp)
        else:
            pick = np.arange(len(labels))
        img_l.append(np.full(len(pick), i))
        ys_l.append(yy[pick])
        xs_l.append(xx[pick])
        lab_l.append(labels[pick])
    return tuple(np.concatenate(a) for a in (img_l, ys_l, xs_l, lab_l))


def level_output(forest: Forest, values: np.ndarray, kind: str = "classnorm"):
    out, guarded = activations.apply(kind, forest_votes_image(forest, values))
    return out, guarded


def train_stack(stacks: Sequence[FeatureStack], label_maps: Sequence[np.ndarray],
                config: StackConfig) -> ForestStack:
    if not stacks:
        raise ValueError("need at least one labelled image")
    if config.n_levels < 1:
        raise ValueError("need at least one level")
    C = config.n_classes
    F = stacks[0].channels
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_levels)
    levels = []
    prev = [None] * len(stacks)
    for k in range(config.n_levels):
        params = config.level(k)
        rng = np.random.default_rng(seeds[k])
        arrays = [level_input(s, p) for s, p in zip(stacks, prev)]
        img, ys, xs, labels = sample_pixels(label_maps, C, params, rng)
        samples = SampleSet(arrays, img, ys, xs, labels)
        log.info("level %d: %d samples, %d channels", k + 1, len(samples), samples.n_channels)
        forest = train_forest(samples, params.tree_params(C), params.n_trees,
                              seed=rng.integers(2**63), n_jobs=config.n_jobs)
        levels.append(forest)
        if k + 1 < config.n_levels:
            prev = [level_output(forest, a)[0] for a in arrays]
    return ForestStack(levels, C, F)


def stack_predict_image(stack: ForestStack, base: FeatureStack | np.ndarray):
    """Run the image through one level at a time.

    Returns ``(final maps, trace)`` where ``trace[k]`` holds level k+1's H x W x C maps.
    """
    values = base.values if isinstance(base, FeatureStack) else np.asarray(base)
    if values.shape[2] != stack.n_base_channels:
        raise SchemaError("image has %d channels, stack expects %d" % (values.shape[2], stack.n_base_channels))
    trace = []
    prev = None
    for forest, kind in zip(stack.levels, stack.activations):
        prev, guarded = level_output(forest, level_input(values, prev), kind)
        if guarded is not None and guarded.any():
            log.warning("class normalization guarded at %d pixels", int(guarded.sum()))
        trace.append(prev)
    return prev, trace


def context_usage(stack: ForestStack, level: int) -> float:
    """Fraction of split nodes at ``level`` (0-based) that read prediction channels."""
    F = stack.n_base_channels
    chans = np.concatenate([t.channel[t.split_ids] for t in stack.levels[level].trees])
    return float(np.mean(chans >= F)) if len(chans) else 0.0


# ---------------------------------------------------------------------------
# persistence: directory with manifest.json plus one forest file per level


def save_forest_stack(path, stack: ForestStack) -> None:
    os.makedirs(path, exist_ok=True)
    files = []
    for k, forest in enumerate(stack.levels):
        name = "level_%d.forest.json" % (k + 1)
        with open(os.path.join(path, name), "w") as fh:
            json.dump(forest_to_dict(forest), fh)
        files.append(name)
    manifest = {
        "format": STACK_FORMAT, "version": STACK_VERSION,
        "n_levels": stack.n_levels, "n_classes": stack.n_classes,
        "n_base_channels": stack.n_base_channels,
        "max_offset": [f.max_offset for f in stack.levels],
        "activations": stack.activations, "signed_votes": stack.signed_votes,
        "variant": stack.variant, "levels": files,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_forest_stack(path) -> ForestStack:
    with open(os.path.join(path, "manifest.json")) as fh:
        m = json.load(fh)
    if m.get("format") != STACK_FORMAT or m.get("version") != STACK_VERSION:
        raise ValueError("%s: not a version-%d forest stack" % (path, STACK_VERSION))
    levels = []
    for name in m["levels"]:
        with open(os.path.join(path, name)) as fh:
            levels.append(forest_from_dict(json.load(fh)))
    return ForestStack(levels, m["n_classes"], m["n_base_channels"], m["activations"],
                       m["signed_votes"], m.get("variant", "rf"))
