"""End-to-end synthetic benchmark: RF stack -> net -> fine-tune -> map back.

Shared by the ``bench`` command and the acceptance tests.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autocontext import LevelParams, StackConfig, stack_predict_image, train_stack
from .deepnet import TrainConfig, map_stack_to_net, net_forward_image, train_sgd
from .features import FilterBank, apply_filter_bank, channel_stats, normalize_channels
from .mapback import map_back_1, map_back_2
from .metrics import dice_class_balanced
from .rf2nn import StrengthTriple
from .synthetic import SyntheticTask, generate

log = logging.getLogger(__name__)

BENCH_FILTERS = ("identity, gaussian(1), gaussian(2), gaussian(4), gradmag(1), laplacian(2), "
                 "st_max(1,2), st_min(1,2)")


@dataclass
class BenchSettings:
    task: SyntheticTask = field(default_factory=SyntheticTask)
    filters: str = BENCH_FILTERS
    n_levels: int = 2
    level: LevelParams = field(default_factory=lambda: LevelParams(
        n_trees=8, max_depth=7, min_samples=25, n_offsets=10, max_offset=24, samples_per_class=60))
    strengths: StrengthTriple = field(default_factory=lambda: StrengthTriple(100.0, 3.0, 0.1))
    normalize_leaf_votes: bool = False
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        iterations=100, lr_a=0.1, lr_b=100.0, stride=4))
    freeze_structure: bool = True
    mb2_stride: int = 4


def prepare_data(task: SyntheticTask, filters: str):
    """Synthetic images -> normalized feature stacks; stats come from the training split."""
    train, test = generate(task)
    bank = FilterBank.from_spec(filters)
    tr = [apply_filter_bank(img, bank) for img, _ in train]
    te = [apply_filter_bank(img, bank) for img, _ in test]
    stats = channel_stats(tr)
    tr = [normalize_channels(s, stats) for s in tr]
    te = [normalize_channels(s, stats) for s in te]
    return list(zip(tr, [l for _, l in train])), list(zip(te, [l for _, l in test]))


def mean_dice(predict, data) -> float:
    return float(np.mean([dice_class_balanced(predict(s), lab) for s, lab in data]))


def run_benchmark(settings: BenchSettings, seed: int = 0) -> dict:
    """One full pipeline run; ``seed`` drives data, forests and SGD order.

    Returns Dice scores per stage, the loss curve endpoints and stage timings.
    """
    t0 = time.perf_counter()
    task = replace(settings.task, seed=seed)
    train, test = prepare_data(task, settings.filters)
    C = task.n_classes
    cfg = StackConfig(settings.n_levels, C, [settings.level], seed=seed)
    stack = train_stack([s for s, _ in train], [l for _, l in train], cfg)
    t_rf = time.perf_counter()
    res = {"seed": seed, "rf": mean_dice(lambda s: stack_predict_image(stack, s)[0], test)}

    net = map_stack_to_net(stack, settings.strengths, normalize_leaf_votes=settings.normalize_leaf_votes)
    res["net_init"] = mean_dice(lambda s: net_forward_image(net, s)[0], test)
    frozen = net.structure_layers() if settings.freeze_structure else ()
    tcfg = replace(settings.train, seed=seed)
    tnet, curve = train_sgd(net, train, tcfg, frozen=frozen)
    t_train = time.perf_counter()
    res["net"] = mean_dice(lambda s: net_forward_image(tnet, s)[0], test)
    k = max(1, len(curve) // 10)
    res["loss_start"] = float(np.mean([c[3] for c in curve[:k]]))
    res["loss_end"] = float(np.mean([c[3] for c in curve[-k:]]))

    mb1 = map_back_1(tnet, stack)
    res["mb1"] = mean_dice(lambda s: stack_predict_image(mb1, s)[0], test)
    report = {}
    mb2 = map_back_2(tnet, stack, train, stride=settings.mb2_stride, report=report)
    res["mb2"] = mean_dice(lambda s: stack_predict_image(mb2, s)[0], test)
    res["populated_leaf_fraction"] = report["populated_leaf_fraction"]
    t_end = time.perf_counter()

    # inference timing: remapped stack vs net on the same image
    img = test[0][0]
    a = time.perf_counter()
    stack_predict_image(mb2, img)
    b = time.perf_counter()
    net_forward_image(tnet, img)
    c = time.perf_counter()
    res.update(time_rf=t_rf - t0, time_train=t_train - t_rf, time_total=t_end - t0,
               time_predict_remapped=b - a, time_predict_net=c - b)
    log.info("seed %d: %s", seed, {k: v for k, v in res.items() if not k.startswith("time")})
    return res


def summarize(runs: list[dict], keys=("rf", "net_init", "net", "mb1", "mb2")) -> dict:
    out = {}
    for key in keys:
        vals = np.array([r[key] for r in runs], dtype=np.float64)
        out[key] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
    return out


def directional_checks(runs: list[dict]) -> dict:
    """Paired margins, each compared with the across-seed standard deviation of the scores."""
    s = summarize(runs)
    net_gain = float(np.mean([r["net"] - r["rf"] for r in runs]))
    mb_gain = float(np.mean([r["mb2"] - r["mb1"] for r in runs]))
    net_sd = max(s["net"][1], s["rf"][1])
    mb_sd = max(s["mb2"][1], s["mb1"][1])
    return {"net_minus_rf": net_gain, "net_rf_sd": net_sd, "net_beats_rf": net_gain > net_sd,
            "mb2_minus_mb1": mb_gain, "mb_sd": mb_sd, "mb2_beats_mb1": mb_gain > mb_sd}
