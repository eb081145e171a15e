import numpy as np
import pytest

from forestnet.synthetic import SyntheticTask, generate


@pytest.mark.parametrize("gen", ["bands", "blobs"])
def test_every_image_covers_all_classes(gen):
    train, test = generate(SyntheticTask(gen, size=64, n_classes=5, n_train=3, n_test=2, seed=1))
    assert len(train) == 3 and len(test) == 2
    for img, lab in train + test:
        assert img.shape == lab.shape == (64, 64)
        assert set(np.unique(lab)) == set(range(5))


def test_seed_determinism():
    a = generate(SyntheticTask(size=48, n_train=2, n_test=1, seed=7))
    b = generate(SyntheticTask(size=48, n_train=2, n_test=1, seed=7))
    c = generate(SyntheticTask(size=48, n_train=2, n_test=1, seed=8))
    for (ia, la), (ib, lb) in zip(a[0] + a[1], b[0] + b[1]):
        np.testing.assert_array_equal(ia, ib)
        np.testing.assert_array_equal(la, lb)
    assert not np.array_equal(a[0][0][0], c[0][0][0])


def test_band_segments_are_roughly_equal():
    # segments split the body's long axis evenly, so foreground classes have similar areas
    train, _ = generate(SyntheticTask(size=128, n_classes=6, n_train=4, n_test=0, seed=0))
    for _, lab in train:
        area = np.bincount(lab.ravel(), minlength=6)[1:]
        assert area.min() > 0.4 * area.max()


def test_segments_look_alike():
    # the body interior has the same mean intensity in every segment
    train, _ = generate(SyntheticTask(size=128, n_classes=6, n_train=2, n_test=0, noise=0.0, seed=2))
    for img, lab in train:
        means = [img[lab == c].mean() for c in range(1, 6)]
        assert max(means) - min(means) < 0.1
        assert img[lab == 0].mean() < min(means)


def test_bad_task():
    with pytest.raises(ValueError):
        generate(SyntheticTask(generator="spirals"))
    with pytest.raises(ValueError):
        generate(SyntheticTask(n_classes=1))
