import numpy as np
import pytest

from econv.errors import RangeError, ShapeError
from econv.synthdata import (
    SynthConfig,
    gen_dataset,
    image_label,
    load_dataset,
    mean_iou,
    pixel_accuracy,
    save_dataset,
    threshold_classifier,
)


def test_same_config_same_data():
    cfg = SynthConfig(seed=4)
    a, b = gen_dataset(cfg, 5), gen_dataset(cfg, 5)
    for s, t in zip(a, b):
        assert s.image.tobytes() == t.image.tobytes()
        assert np.array_equal(s.labels, t.labels)


def test_seed_changes_data():
    a = gen_dataset(SynthConfig(seed=1), 1)[0]
    b = gen_dataset(SynthConfig(seed=2), 1)[0]
    assert not np.array_equal(a.image, b.image)


def test_geometry_does_not_depend_on_noise():
    a = gen_dataset(SynthConfig(noise_sigma=0.0, seed=3), 4)
    b = gen_dataset(SynthConfig(noise_sigma=0.3, seed=3), 4)
    assert all(np.array_equal(s.labels, t.labels) for s, t in zip(a, b))


def test_shapes_and_label_range():
    cfg = SynthConfig(image_size=32, num_classes=4, seed=5)
    for s in gen_dataset(cfg, 20):
        assert s.image.shape == (32, 32, 1) and s.labels.shape == (32, 32)
        assert s.labels.dtype == np.int64
        assert s.labels.min() >= 0 and s.labels.max() < 4
        assert (s.labels > 0).any()


def test_noiseless_single_rectangle_band():
    cfg = SynthConfig(image_size=24, num_classes=2, shapes_per_image=(1, 1), noise_sigma=0.0, seed=0)
    for s in gen_dataset(cfg, 10):
        inside = s.image[:, :, 0] > 0.5
        assert np.array_equal(inside, s.labels == 1)
        assert np.all(np.abs(s.image[:, :, 0] - s.labels) <= 0.05)


def test_threshold_classifier_separates_noise_levels():
    clean = gen_dataset(SynthConfig(noise_sigma=0.0, seed=6), 10)
    noisy = gen_dataset(SynthConfig(noise_sigma=0.1, seed=6), 10)

    def acc(samples):
        pred = np.stack([threshold_classifier(s.image, 3) for s in samples])
        return pixel_accuracy(pred, np.stack([s.labels for s in samples]))

    assert acc(clean) == 1.0
    assert acc(noisy) < 1.0


@pytest.mark.parametrize("kwargs", [
    {"num_classes": 1}, {"image_size": 8}, {"shapes_per_image": (0, 2)},
    {"shapes_per_image": (3, 2)},
])
def test_bad_config(kwargs):
    with pytest.raises(RangeError):
        SynthConfig(**kwargs)


def test_mean_iou_half_background():
    labels = np.array([[0, 0], [1, 1]])
    pred = np.zeros((2, 2), dtype=int)
    assert pixel_accuracy(pred, labels) == 0.5
    assert mean_iou(pred, labels, 2) == pytest.approx(0.25)


def test_mean_iou_perfect_and_absent_classes():
    labels = np.array([[0, 1], [1, 0]])
    assert mean_iou(labels, labels, 5) == 1.0


def test_metrics_ignore_and_shape():
    labels = np.array([[-1, 1], [0, 0]])
    pred = np.array([[1, 1], [0, 1]])
    assert pixel_accuracy(pred, labels) == pytest.approx(2 / 3)
    assert pixel_accuracy(pred, np.full((2, 2), -1)) == 0.0
    # class 0: inter 1, union 2; class 1: inter 1, union 2
    assert mean_iou(pred, labels, 2) == pytest.approx(0.5)
    with pytest.raises(ShapeError):
        pixel_accuracy(pred, np.zeros((3, 3)))


def test_image_label():
    assert image_label(np.array([[0, 0, 2], [1, 2, 0]])) == 2
    assert image_label(np.array([[1, 2]])) == 1
    assert image_label(np.zeros((2, 2), dtype=int)) == 0


def test_dataset_files_roundtrip(tmp_path):
    samples = gen_dataset(SynthConfig(image_size=16, seed=7), 3)
    save_dataset(samples, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert len(back) == 3
    for s, t in zip(samples, back):
        assert s.image.tobytes() == t.image.tobytes()
        assert np.array_equal(s.labels, t.labels)
