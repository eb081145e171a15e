"""Command-line entry point: ``forestnet <command> [options]``.

Commands follow the pipeline: ``train-rf`` -> ``map`` -> ``finetune`` ->
``mapback``, plus ``predict``, ``eval``, ``inspect``, ``synth`` and ``bench``.
Experiments are described by an INI file (see ``ExperimentConfig``); every
artifact lands in its ``output`` directory unless a path is given explicitly.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from PIL import Image

from .autocontext import (LevelParams, StackConfig, load_forest_stack, save_forest_stack,
                          stack_predict_image, train_stack)
from .deepnet import (NumericalError, SparseNet, TrainConfig, TrainingDiverged, export_activation_images,
                      load_net, map_stack_to_net, net_forward_image, save_net, train_sgd, write_curve)
from .features import FeatureStack, FilterBank, apply_filter_bank, channel_stats, normalize_channels
from .forest import SchemaError
from .mapback import MapBackError, map_back_1, map_back_2
from .metrics import dice_class_balanced, pixel_accuracy_foreground, write_metric_rows
from .rf2nn import INFERENCE_STRENGTHS, StrengthTriple
from .synthetic import SyntheticTask, generate

log = logging.getLogger("forestnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "FORESTNET_THREADS"
IGNORE_ON_DISK = 255
FEATURES_FILE = "features.json"


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

DEFAULTS = {
    "data": {"images": "images", "labels": "labels", "split": "split.txt", "n_classes": "0"},
    "features": {"bank": "identity, gaussian(1), gaussian(2), gaussian(4), gradmag(1), "
                         "laplacian(2), st_max(1,2), st_min(1,2)"},
    "forest": {"levels": "2", "n_trees": "16", "max_depth": "12", "min_samples": "25",
               "n_offsets": "10", "n_thresholds": "20", "max_offset": "64",
               "samples_per_class": "20", "sample_stride": "1"},
    "strengths": {"str_in": "100", "str_path": "1", "str_vote": "0.1", "normalize_votes": "no"},
    "train": {"loss": "ce", "lr_a": "0.01", "lr_b": "400", "momentum": "sutskever",
              "mu_max": "0.95", "iterations": "100", "stride": "5", "sparse": "yes",
              "freeze_structure": "yes", "checkpoint_every": "0"},
    "run": {"output": "out", "seed": "0"},
}


@dataclass
class ExperimentConfig:
    images: str
    labels: str
    split: str
    n_classes: int
    bank: str
    n_levels: int
    level: LevelParams
    strengths: StrengthTriple
    normalize_votes: bool
    train: TrainConfig
    freeze_structure: bool
    output: str
    seed: int
    root: str = "."
    train_names: list = field(default_factory=list)
    test_names: list = field(default_factory=list)

    @classmethod
    def load(cls, path: str, check_paths: bool = True) -> "ExperimentConfig":
        if not os.path.isfile(path):
            raise ConfigError("config file %s not found" % path)
        cp = configparser.ConfigParser()
        cp.read_dict(DEFAULTS)
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        unknown = [(s, k) for s in cp.sections() for k in cp[s]
                   if s not in DEFAULTS or k not in DEFAULTS[s]]
        if unknown:
            raise ConfigError("unknown config keys: %s" % ", ".join("%s.%s" % u for u in unknown))
        root = os.path.dirname(os.path.abspath(path))
        rel = lambda p: p if os.path.isabs(p) else os.path.join(root, p)
        try:
            f, s, t = cp["forest"], cp["strengths"], cp["train"]
            level = LevelParams(n_trees=f.getint("n_trees"), max_depth=f.getint("max_depth"),
                                min_samples=f.getint("min_samples"), n_offsets=f.getint("n_offsets"),
                                n_thresholds=f.getint("n_thresholds"), max_offset=f.getint("max_offset"),
                                samples_per_class=f.getint("samples_per_class"),
                                sample_stride=f.getint("sample_stride"))
            seed = cp["run"].getint("seed")
            tc = TrainConfig(loss=t["loss"], lr_a=t.getfloat("lr_a"), lr_b=t.getfloat("lr_b"),
                             momentum=t["momentum"], mu_max=t.getfloat("mu_max"),
                             iterations=t.getint("iterations"), stride=t.getint("stride"),
                             sparse=t.getboolean("sparse"), checkpoint_every=t.getint("checkpoint_every"),
                             seed=seed)
            cfg = cls(images=rel(cp["data"]["images"]), labels=rel(cp["data"]["labels"]),
                      split=rel(cp["data"]["split"]), n_classes=cp["data"].getint("n_classes"),
                      bank=cp["features"]["bank"], n_levels=f.getint("levels"), level=level,
                      strengths=StrengthTriple(s.getfloat("str_in"), s.getfloat("str_path"),
                                               s.getfloat("str_vote")),
                      normalize_votes=s.getboolean("normalize_votes"), train=tc,
                      freeze_structure=t.getboolean("freeze_structure"),
                      output=rel(cp["run"]["output"]), seed=seed, root=root)
            FilterBank.from_spec(cfg.bank)
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        if cfg.n_levels < 1:
            raise ConfigError("forest.levels must be at least 1")
        if check_paths:
            for name in ("images", "labels", "split"):
                p = getattr(cfg, name)
                if not os.path.exists(p):
                    raise ConfigError("data.%s: %s does not exist" % (name, p))
            cfg.train_names, cfg.test_names = read_split(cfg.split)
        return cfg


def read_split(path: str):
    """Split file: one ``train <name>`` or ``test <name>`` line per image."""
    parts = {"train": [], "test": []}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                which, name = line.split(None, 1)
                parts[which].append(name)
            except (ValueError, KeyError):
                raise ConfigError("%s:%d: expected 'train <name>' or 'test <name>'" % (path, n)) from None
    overlap = set(parts["train"]) & set(parts["test"])
    if overlap:
        raise ConfigError("split file lists %d images in both train and test" % len(overlap))
    return parts["train"], parts["test"]


# ---------------------------------------------------------------------------
# image and label I/O


def read_image(path: str) -> np.ndarray:
    """Grayscale 8- or 16-bit PNG/PGM -> float image in [0, 1]."""
    try:
        im = Image.open(path)
        im.load()
    except (OSError, ValueError) as exc:
        raise DataError("cannot read image %s: %s" % (path, exc)) from exc
    if im.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(im, dtype=np.float64)
        return arr / (65535.0 if arr.max(initial=0) > 255 or im.mode.startswith("I;16") else 255.0)
    if im.mode != "L":
        im = im.convert("L")
    return np.asarray(im, dtype=np.float64) / 255.0


def write_image16(path: str, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img) * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def palette(n_classes: int) -> list[tuple[int, int, int]]:
    """Class 0 black, then evenly spaced hues."""
    import colorsys
    cols = [(0, 0, 0)]
    for c in range(1, n_classes):
        r, g, b = colorsys.hsv_to_rgb((c - 1) / max(1, n_classes - 1), 0.8, 1.0)
        cols.append((int(r * 255), int(g * 255), int(b * 255)))
    return cols


def write_label_map(path: str, labels: np.ndarray, n_classes: int) -> None:
    """8-bit indexed PNG; ignore pixels stored as 255. Writes a ``.palette.json`` sidecar."""
    lab = np.asarray(labels)
    out = np.where(lab < 0, IGNORE_ON_DISK, lab).astype(np.uint8)
    im = Image.fromarray(out, mode="P")
    pal = palette(n_classes)
    flat = [v for rgb in pal for v in rgb]
    flat += [0] * (768 - len(flat))
    flat[3 * IGNORE_ON_DISK:3 * IGNORE_ON_DISK + 3] = [255, 255, 255]
    im.putpalette(flat)
    im.save(path)
    with open(os.path.splitext(path)[0] + ".palette.json", "w") as fh:
        json.dump({"n_classes": n_classes, "background": 0, "ignore": IGNORE_ON_DISK,
                   "colors": pal}, fh)


def read_label_map(path: str) -> np.ndarray:
    try:
        im = Image.open(path)
        arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError("cannot read label map %s: %s" % (path, exc)) from exc
    if arr.ndim != 2:
        raise DataError("label map %s is not single-channel" % path)
    arr = arr.astype(np.int64)
    arr[arr == IGNORE_ON_DISK] = -1
    return arr


def _find(directory: str, name: str) -> str:
    p = os.path.join(directory, name)
    if os.path.exists(p):
        return p
    stem = os.path.splitext(name)[0]
    for ext in (".png", ".pgm", ".tif", ".tiff"):
        if os.path.exists(os.path.join(directory, stem + ext)):
            return os.path.join(directory, stem + ext)
    raise DataError("no file for %s in %s" % (name, directory))


# ---------------------------------------------------------------------------
# feature handling shared by all commands


def features_for(cfg: ExperimentConfig, images: list[np.ndarray], stats=None):
    bank = FilterBank.from_spec(cfg.bank)
    stacks = [apply_filter_bank(img, bank) for img in images]
    if stats is None:
        stats = channel_stats(stacks)
    return [normalize_channels(s, stats) for s in stacks], stats


def save_feature_stats(path: str, cfg: ExperimentConfig, stats) -> None:
    with open(path, "w") as fh:
        json.dump({"bank": cfg.bank, "mean": stats[0].tolist(), "std": stats[1].tolist()}, fh)


def load_feature_stats(path: str, cfg: ExperimentConfig):
    if not os.path.exists(path):
        raise DataError("%s missing; run train-rf first" % path)
    with open(path) as fh:
        d = json.load(fh)
    if d["bank"] != cfg.bank:
        raise ConfigError("filter bank in config differs from the one the model was trained with")
    return np.asarray(d["mean"]), np.asarray(d["std"])


def load_split(cfg: ExperimentConfig, which: str, stats=None, with_labels: bool = True):
    names = cfg.train_names if which == "train" else cfg.test_names
    if not names:
        raise DataError("split file lists no %s images" % which)
    images = [read_image(_find(cfg.images, n)) for n in names]
    labels = [read_label_map(_find(cfg.labels, n)) for n in names] if with_labels else None
    if labels is not None:
        for n, img, lab in zip(names, images, labels):
            if img.shape != lab.shape:
                raise DataError("%s: image %s and label map %s differ" % (n, img.shape, lab.shape))
    stacks, stats = features_for(cfg, images, stats)
    return names, stacks, labels, stats


def n_classes_of(cfg: ExperimentConfig, labels) -> int:
    if cfg.n_classes:
        return cfg.n_classes
    return int(max(l.max() for l in labels)) + 1


def load_model(path: str):
    """Stack directory (has manifest.json) or serialized net file."""
    if os.path.isdir(path):
        if not os.path.exists(os.path.join(path, "manifest.json")):
            raise DataError("%s holds no stack manifest" % path)
        return load_forest_stack(path)
    if not os.path.exists(path):
        raise DataError("model %s not found" % path)
    return load_net(path)


def predict_maps(model, stack: FeatureStack) -> np.ndarray:
    if isinstance(model, SparseNet):
        return net_forward_image(model, stack)[0]
    return stack_predict_image(model, stack)[0]


def _out(cfg: ExperimentConfig, name: str) -> str:
    os.makedirs(cfg.output, exist_ok=True)
    return os.path.join(cfg.output, name)


# ---------------------------------------------------------------------------
# commands


def cmd_train_rf(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    names, stacks, labels, stats = load_split(cfg, "train")
    C = n_classes_of(cfg, labels)
    level = replace(cfg.level, n_trees=args.trees or cfg.level.n_trees)
    sc = StackConfig(cfg.n_levels, C, [level], seed=cfg.seed, n_jobs=args.threads)
    t0 = time.perf_counter()
    stack = train_stack(stacks, labels, sc)
    out = args.out or _out(cfg, "stack")
    save_forest_stack(out, stack)
    save_feature_stats(_out(cfg, FEATURES_FILE), cfg, stats)
    report = {"n_levels": stack.n_levels, "n_classes": C, "images": len(names),
              "seconds": round(time.perf_counter() - t0, 3), "levels": []}
    traces = [stack_predict_image(stack, s)[1] for s in stacks]
    for k in range(stack.n_levels):
        acc = float(np.mean([pixel_accuracy_foreground(tr[k], lab, n_classes=C)
                             for tr, lab in zip(traces, labels)]))
        dice = float(np.mean([dice_class_balanced(tr[k], lab, n_classes=C)
                              for tr, lab in zip(traces, labels)]))
        forest = stack.levels[k]
        report["levels"].append({"level": k + 1, "train_accuracy": acc, "train_dice": dice,
                                 "trees": forest.n_trees,
                                 "leaves": int(sum(len(t.leaf_ids) for t in forest.trees))})
        print("level %d: train accuracy %.4f, dice %.4f" % (k + 1, acc, dice))
    with open(os.path.join(out, "training_report.json"), "w") as fh:
        json.dump(report, fh, indent=1)
    print("stack written to %s" % out)
    return EXIT_OK


def cmd_map(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    stack = load_forest_stack(args.stack or _out(cfg, "stack"))
    strengths = INFERENCE_STRENGTHS if args.inference else cfg.strengths
    net = map_stack_to_net(stack, strengths, normalize_leaf_votes=cfg.normalize_votes)
    out = args.out or _out(cfg, "net.fnet")
    save_net(out, net)
    print("hidden layers: %d (levels: %d)" % (net.n_hidden_layers, net.n_levels))
    if cfg.test_names:
        stats = load_feature_stats(_out(cfg, FEATURES_FILE), cfg)
        names, stacks, _, _ = load_split(cfg, "test", stats, with_labels=False)
        a = np.argmax(net_forward_image(net, stacks[0])[0], axis=2)
        b = np.argmax(stack_predict_image(stack, stacks[0])[0], axis=2)
        print("argmax parity on %s: %.4f of pixels agree" % (names[0], float(np.mean(a == b))))
    print("net written to %s" % out)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    net = load_net(args.net or _out(cfg, "net.fnet"))
    stats = load_feature_stats(_out(cfg, FEATURES_FILE), cfg)
    _, stacks, labels, _ = load_split(cfg, "train", stats)
    tc = cfg.train
    if args.iterations is not None:
        tc = replace(tc, iterations=args.iterations)
    if tc.checkpoint_every:
        tc = replace(tc, checkpoint_path=_out(cfg, "checkpoint_%06d.fnet"))
    frozen = net.structure_layers() if cfg.freeze_structure else ()
    out = args.out or _out(cfg, "net_finetuned.fnet")
    curve_path = _out(cfg, "loss.csv")
    try:
        tnet, curve = train_sgd(net, list(zip(stacks, labels)), tc, frozen=frozen)
    except TrainingDiverged as exc:
        save_net(out + ".last_good", exc.net)
        write_curve(curve_path, exc.curve)
        raise
    save_net(out, tnet)
    write_curve(curve_path, curve)
    print("loss %.5f -> %.5f over %d iterations" % (curve[0][3], curve[-1][3], len(curve)))
    print("net written to %s, loss curve to %s" % (out, curve_path))
    return EXIT_OK


def cmd_mapback(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    net = load_net(args.net or _out(cfg, "net_finetuned.fnet"))
    source = load_forest_stack(args.stack or _out(cfg, "stack"))
    out = args.out or _out(cfg, "stack_" + args.variant)
    if args.variant == "mb1":
        rs = map_back_1(net, source)
        report = {"variant": "mb1"}
    else:
        stats = load_feature_stats(_out(cfg, FEATURES_FILE), cfg)
        _, stacks, labels, _ = load_split(cfg, "train", stats)
        report = {}
        rs = map_back_2(net, source, list(zip(stacks, labels)), stride=args.stride, report=report)
        report = {"variant": "mb2", "samples": report["samples"],
                  "populated_leaf_fraction": report["populated_leaf_fraction"]}
        for k, frac in enumerate(report["populated_leaf_fraction"]):
            print("level %d: %.1f%% of leaves re-estimated" % (k + 1, 100 * frac))
    save_forest_stack(out, rs)
    with open(os.path.join(out, "mapback_report.json"), "w") as fh:
        json.dump(report, fh, indent=1)
    print("%s stack written to %s" % (args.variant, out))
    return EXIT_OK


def _input_images(cfg, paths):
    if paths:
        return [os.path.splitext(os.path.basename(p))[0] for p in paths], [read_image(p) for p in paths]
    if not cfg.test_names:
        raise DataError("no input images given and the split has no test images")
    return ([os.path.splitext(n)[0] for n in cfg.test_names],
            [read_image(_find(cfg.images, n)) for n in cfg.test_names])


def cmd_predict(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    model = load_model(args.model)
    stats = load_feature_stats(_out(cfg, FEATURES_FILE), cfg)
    names, images = _input_images(cfg, args.images)
    stacks, _ = features_for(cfg, images, stats)
    out_dir = args.out or _out(cfg, "predictions")
    os.makedirs(out_dir, exist_ok=True)
    for name, s in zip(names, stacks):
        maps = predict_maps(model, s)
        write_label_map(os.path.join(out_dir, name + ".png"), np.argmax(maps, axis=2), maps.shape[2])
    print("%d label maps written to %s" % (len(names), out_dir))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    model = load_model(args.model)
    stats = load_feature_stats(_out(cfg, FEATURES_FILE), cfg)
    names, stacks, labels, _ = load_split(cfg, args.split, stats)
    C = model.n_classes
    rows = []
    for name, s, lab in zip(names, stacks, labels):
        maps = predict_maps(model, s)
        rows.append((name, "pixel_accuracy", pixel_accuracy_foreground(maps, lab, n_classes=C)))
        rows.append((name, "dice", dice_class_balanced(maps, lab, n_classes=C)))
    out = args.out or _out(cfg, "metrics_%s.csv" % args.split)
    write_metric_rows(out, rows)
    for metric in ("pixel_accuracy", "dice"):
        print("%s: %.4f" % (metric, float(np.nanmean([v for _, m, v in rows if m == metric]))))
    print("metrics written to %s" % out)
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    net = load_net(args.model)
    stats = load_feature_stats(_out(cfg, FEATURES_FILE), cfg)
    names, images = _input_images(cfg, args.images)
    stacks, _ = features_for(cfg, images, stats)
    layers = args.layers.split(",") if args.layers else net.prediction_layers() + ["out"]
    for layer in layers:
        net.layer_index(layer)
    out_dir = args.out or _out(cfg, "activations")
    written = []
    for name, s in zip(names, stacks):
        _, snap = net_forward_image(net, s, capture=layers)
        for layer in layers:
            written += export_activation_images(snap, layer, None, out_dir, prefix=name + "_")
    print("%d activation images written to %s" % (len(written), out_dir))
    return EXIT_OK


def cmd_synth(args) -> int:
    task = SyntheticTask(args.generator, args.size, args.classes, args.noise, args.n_train, args.n_test,
                         args.seed)
    try:
        train, test = generate(task)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    root = args.out
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    lines = []
    for which, pairs in (("train", train), ("test", test)):
        for i, (img, lab) in enumerate(pairs):
            name = "%s_%03d.png" % (which, i)
            lo, hi = img.min(), img.max()
            write_image16(os.path.join(root, "images", name), (img - lo) / (hi - lo + 1e-12))
            write_label_map(os.path.join(root, "labels", name), lab, task.n_classes)
            lines.append("%s %s" % (which, name))
    with open(os.path.join(root, "split.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    cp = configparser.ConfigParser()
    cp.read_dict({"data": {"images": "images", "labels": "labels", "split": "split.txt",
                           "n_classes": str(task.n_classes)},
                  "run": {"output": "out", "seed": str(task.seed)}})
    with open(os.path.join(root, "experiment.ini"), "w") as fh:
        cp.write(fh)
    with open(os.path.join(root, "task.json"), "w") as fh:
        json.dump(asdict(task), fh, indent=1)
    hist = np.bincount(np.concatenate([l.ravel() for _, l in train + test]), minlength=task.n_classes)
    print("class histogram: %s" % " ".join("%d:%.3f" % (c, h / hist.sum()) for c, h in enumerate(hist)))
    print("%d train / %d test images written to %s" % (len(train), len(test), root))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import BenchSettings, directional_checks, run_benchmark, summarize

    settings = BenchSettings()
    settings = replace(settings, train=replace(settings.train, iterations=args.iterations))
    runs = []
    for seed in range(args.seeds):
        r = run_benchmark(settings, seed)
        runs.append(r)
        print("seed %d: rf %.4f  net0 %.4f  net %.4f  mb1 %.4f  mb2 %.4f  (%.0f s)"
              % (seed, r["rf"], r["net_init"], r["net"], r["mb1"], r["mb2"], r["time_total"]))
    s = summarize(runs)
    for key, (m, sd) in s.items():
        print("%-8s %.4f +- %.4f" % (key, m, sd))
    chk = directional_checks(runs)
    print("net - rf  = %+.4f (sd %.4f): %s" % (chk["net_minus_rf"], chk["net_rf_sd"],
                                             "PASS" if chk["net_beats_rf"] else "FAIL"))
    print("mb2 - mb1 = %+.4f (sd %.4f): %s" % (chk["mb2_minus_mb1"], chk["mb_sd"],
                                             "PASS" if chk["mb2_beats_mb1"] else "FAIL"))
    t_rs = np.mean([r["time_predict_remapped"] for r in runs])
    t_net = np.mean([r["time_predict_net"] for r in runs])
    print("prediction time per image: remapped stack %.3f s, net %.3f s" % (t_rs, t_net))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        keys = [k for k in runs[0] if k != "populated_leaf_fraction"]
        with open(os.path.join(args.out, "bench.csv"), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(keys)
            for r in runs:
                wr.writerow([r[k] for k in keys])
    return EXIT_OK


# ---------------------------------------------------------------------------


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("%s must be an integer, got %r" % (THREADS_ENV, raw)) from None
    return max(1, n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forestnet", description=__doc__.split("\n")[0])
    p.add_argument("--threads", type=int, default=None,
                   help="worker cap (default: $%s or 1)" % THREADS_ENV)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("-c", "--config", required=True)
        sp.set_defaults(func=fn)
        return sp

    sp = with_config("train-rf", cmd_train_rf, "train the stacked forest")
    sp.add_argument("--trees", type=int, default=None, help="override trees per level")
    sp.add_argument("-o", "--out")
    sp = with_config("map", cmd_map, "map a stack to a sparse net")
    sp.add_argument("--stack")
    sp.add_argument("--inference", action="store_true", help="use saturated strengths")
    sp.add_argument("-o", "--out")
    sp = with_config("finetune", cmd_finetune, "train a mapped net with SGD")
    sp.add_argument("--net")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("-o", "--out")
    sp = with_config("mapback", cmd_mapback, "map a trained net back to a stack")
    sp.add_argument("--variant", choices=("mb1", "mb2"), default="mb2")
    sp.add_argument("--net")
    sp.add_argument("--stack")
    sp.add_argument("--stride", type=int, default=1, help="training-pixel stride for mb2")
    sp.add_argument("-o", "--out")
    for name, fn, help in (("predict", cmd_predict, "write label maps"),
                           ("inspect", cmd_inspect, "export hidden activation images")):
        sp = with_config(name, fn, help)
        sp.add_argument("-m", "--model", required=True)
        sp.add_argument("images", nargs="*")
        sp.add_argument("-o", "--out")
        if name == "inspect":
            sp.add_argument("--layers", help="comma-separated, default H3,H6,...,out")
    sp = with_config("eval", cmd_eval, "score a model against labels")
    sp.add_argument("-m", "--model", required=True)
    sp.add_argument("--split", choices=("train", "test"), default="test")
    sp.add_argument("-o", "--out")

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    sp.set_defaults(func=cmd_synth)
    sp.add_argument("-o", "--out", required=True)
    sp.add_argument("--generator", default="bands", choices=("bands", "blobs"))
    sp.add_argument("--size", type=int, default=128)
    sp.add_argument("--classes", type=int, default=6)
    sp.add_argument("--noise", type=float, default=0.08)
    sp.add_argument("--n-train", type=int, default=20)
    sp.add_argument("--n-test", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("bench", help="synthetic end-to-end benchmark over several seeds")
    sp.set_defaults(func=cmd_bench)
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--iterations", type=int, default=100)
    sp.add_argument("-o", "--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is None:
            args.threads = default_threads()
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
        from threadpoolctl import threadpool_limits
        with threadpool_limits(args.threads):
            return args.func(args)
    except (ConfigError, configparser.Error) as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError, MapBackError, FileNotFoundError) as exc:
        print("data error: %s" % exc, file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, TrainingDiverged) as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
