import csv
import json
import os
import shutil

import numpy as np
import pytest
from PIL import Image

from forestnet import cli
from forestnet.autocontext import load_forest_stack, stack_predict_image
from forestnet.deepnet import learning_rate, load_net, nets_equal
from forestnet.metrics import dice_class_balanced, pixel_accuracy_foreground

SMALL = """
[forest]
levels = 2
n_trees = 3
max_depth = 5
min_samples = 5
max_offset = 8
samples_per_class = 40

[features]
bank = identity, gaussian(1), gaussian(3), gradmag(1)

[strengths]
str_path = 3

[train]
iterations = 12
lr_a = 0.05
lr_b = 10
stride = 4
checkpoint_every = 5
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


def make_dataset(root, seed=0, extra=SMALL):
    rc = run("synth", "-o", root, "--size", 40, "--classes", 4, "--n-train", 3, "--n-test", 2,
             "--seed", seed)
    assert rc == 0
    with open(os.path.join(root, "experiment.ini"), "a") as fh:
        fh.write(extra)
    return os.path.join(root, "experiment.ini")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    ini = make_dataset(root)
    out = root / "out"
    assert run("train-rf", "-c", ini) == 0
    assert run("map", "-c", ini) == 0
    assert run("finetune", "-c", ini) == 0
    assert run("mapback", "-c", ini, "--variant", "mb1") == 0
    assert run("mapback", "-c", ini, "--variant", "mb2") == 0
    return root, ini, out


def test_synth_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    make_dataset(a, seed=3)
    hist_line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("class histogram")]
    make_dataset(b, seed=3)
    for name in sorted(os.listdir(a / "images")):
        np.testing.assert_array_equal(np.asarray(Image.open(a / "images" / name)),
                                      np.asarray(Image.open(b / "images" / name)))
        np.testing.assert_array_equal(cli.read_label_map(str(a / "labels" / name)),
                                      cli.read_label_map(str(b / "labels" / name)))
    train, test = cli.read_split(str(a / "split.txt"))
    assert len(train) == 3 and len(test) == 2 and not set(train) & set(test)
    # every class shows up and the reported fractions match the label maps
    labs = np.concatenate([cli.read_label_map(str(a / "labels" / n)).ravel() for n in train + test])
    frac = np.bincount(labs, minlength=4) / labs.size
    assert np.all(frac > 0)
    shown = [float(t.split(":")[1]) for t in hist_line[0].split()[2:]]
    np.testing.assert_allclose(shown, frac, atol=5e-4)


def test_split_overlap_rejected(tmp_path):
    p = tmp_path / "split.txt"
    p.write_text("train a.png\ntest a.png\n")
    with pytest.raises(cli.ConfigError):
        cli.read_split(str(p))


def test_train_rf_report(pipeline):
    root, ini, out = pipeline
    rep = json.loads((out / "stack" / "training_report.json").read_text())
    assert rep["n_levels"] == 2 and len(rep["levels"]) == 2
    # recompute level accuracy from the saved stack
    cfg = cli.ExperimentConfig.load(str(ini))
    stats = cli.load_feature_stats(str(out / cli.FEATURES_FILE), cfg)
    _, stacks, labels, _ = cli.load_split(cfg, "train", stats)
    stack = load_forest_stack(str(out / "stack"))
    for k in range(2):
        acc = np.mean([pixel_accuracy_foreground(stack_predict_image(stack, s)[1][k], l, n_classes=4)
                       for s, l in zip(stacks, labels)])
        assert rep["levels"][k]["train_accuracy"] == pytest.approx(acc, abs=1e-12)


def test_map_reports_hidden_layers(pipeline, capsys, tmp_path):
    root, ini, out = pipeline
    assert run("map", "-c", ini, "--inference", "-o", tmp_path / "inf.fnet") == 0
    text = capsys.readouterr().out
    assert "hidden layers: 5 (levels: 2)" in text
    assert "argmax parity" in text
    net = load_net(str(out / "net.fnet"))
    assert nets_equal(net, load_net(str(out / "net.fnet")))
    assert net.n_hidden_layers == 3 * 2 - 1


def test_finetune_outputs(pipeline, tmp_path):
    root, ini, out = pipeline
    with open(out / "loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12
    lrs = [float(r["lr"]) for r in rows]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    assert lrs[0] == learning_rate(0, 0.05, 10)
    ck = load_net(str(out / "checkpoint_000010.fnet"))
    assert ck.n_levels == 2
    # seeded rerun gives the same curve
    shutil.copy(out / "loss.csv", tmp_path / "first.csv")
    assert run("finetune", "-c", ini, "-o", tmp_path / "again.fnet") == 0
    assert (out / "loss.csv").read_text() == (tmp_path / "first.csv").read_text()
    assert nets_equal(load_net(str(out / "net_finetuned.fnet")), load_net(str(tmp_path / "again.fnet")))


def test_mapback_outputs(pipeline):
    root, ini, out = pipeline
    rep = json.loads((out / "stack_mb2" / "mapback_report.json").read_text())
    assert rep["variant"] == "mb2"
    assert len(rep["populated_leaf_fraction"]) == 2
    assert all(0 < f <= 1 for f in rep["populated_leaf_fraction"])
    assert load_forest_stack(str(out / "stack_mb2")).variant == "mb2"
    assert load_forest_stack(str(out / "stack_mb1")).variant == "mb1"


def test_predict_eval_inspect(pipeline):
    root, ini, out = pipeline
    assert run("predict", "-c", ini, "-m", out / "stack_mb2") == 0
    pngs = sorted(os.listdir(out / "predictions"))
    assert [p for p in pngs if p.endswith(".png")] == ["test_000.png", "test_001.png"]
    assert Image.open(out / "predictions" / "test_000.png").mode == "P"

    assert run("eval", "-c", ini, "-m", out / "net_finetuned.fnet") == 0
    with open(out / "metrics_test.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    cfg = cli.ExperimentConfig.load(str(ini))
    stats = cli.load_feature_stats(str(out / cli.FEATURES_FILE), cfg)
    names, stacks, labels, _ = cli.load_split(cfg, "test", stats)
    net = load_net(str(out / "net_finetuned.fnet"))
    maps = cli.predict_maps(net, stacks[0])
    want = dice_class_balanced(maps, labels[0], n_classes=4)
    got = [float(r[2]) for r in rows if r[0] == names[0] and r[1] == "dice"]
    assert got == [want]
    assert any(r[0] == "mean" for r in rows)

    assert run("inspect", "-c", ini, "-m", out / "net_finetuned.fnet") == 0
    files = os.listdir(out / "activations")
    h3 = [f for f in files if "H3" in f and f.endswith(".png")]
    assert len(h3) == 2 * 4  # one map per class per test image
    assert Image.open(out / "activations" / h3[0]).size == (40, 40)


def test_missing_labels_dir_is_config_error(tmp_path):
    ini = make_dataset(tmp_path / "d")
    shutil.rmtree(tmp_path / "d" / "labels")
    assert run("train-rf", "-c", ini) == 2


def test_unknown_key_is_config_error(tmp_path):
    ini = make_dataset(tmp_path / "d", extra="\n[run]\ncolour = blue\n")
    assert run("train-rf", "-c", ini) == 2


def test_bad_image_is_data_error(tmp_path):
    ini = make_dataset(tmp_path / "d")
    (tmp_path / "d" / "images" / "train_000.png").write_bytes(b"not a png")
    assert run("train-rf", "-c", ini) == 3


def test_divergence_is_numerical_error(tmp_path):
    ini = make_dataset(tmp_path / "d", extra=SMALL.replace("lr_a = 0.05", "lr_a = 1e12"))
    assert run("train-rf", "-c", ini) == 0
    assert run("map", "-c", ini) == 0
    assert run("finetune", "-c", ini) == 4
    assert os.path.exists(tmp_path / "d" / "out" / "net_finetuned.fnet.last_good")


def test_threads_flag_and_env(tmp_path, monkeypatch):
    ini = make_dataset(tmp_path / "d")
    assert run("--threads", 0, "train-rf", "-c", ini) == 2
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    assert run("train-rf", "-c", ini) == 2
    monkeypatch.setenv(cli.THREADS_ENV, "2")
    assert cli.default_threads() == 2
    assert run("train-rf", "-c", ini) == 0
