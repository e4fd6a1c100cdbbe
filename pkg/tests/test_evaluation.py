"""Metrics against raw-pair recounts, fold plans, overlays, segmentation."""

import numpy as np
import pytest

from octplaque.errors import EmptyMaskError
from octplaque.evaluation import (
    CLASS_COLORS,
    class_fractions,
    confusion_matrix,
    format_report,
    make_folds,
    make_overlay,
    overall_accuracy,
    segment_image,
    sensitivity,
    write_confusion_csv,
)
from octplaque.preprocess import BK, LT, FT, MT, CA, TissueScene


def recount_oracle(true_labels, predicted, k=5):
    """Pure-python pair counting; the obvious O(n) reference."""
    cm = [[0] * k for _ in range(k)]
    for t, p in zip(true_labels.tolist(), predicted.tolist()):
        cm[t][p] += 1
    return np.array(cm)


def test_confusion_matrix_matches_recount(rng):
    for _ in range(10):
        n = int(rng.integers(1, 500))
        t = rng.integers(0, 5, n)
        p = rng.integers(0, 5, n)
        cm = confusion_matrix(t, p)
        assert np.array_equal(cm, recount_oracle(t, p))


def test_accuracy_and_sensitivity_match_recounts(rng):
    t = rng.integers(0, 5, 1000)
    p = rng.integers(0, 5, 1000)
    cm = confusion_matrix(t, p)
    assert overall_accuracy(cm) == np.mean(t == p)
    sens = sensitivity(cm)
    for c in range(5):
        mask = t == c
        assert sens[c] == np.mean(p[mask] == c)


def test_sensitivity_pin_and_absent_class():
    cm = np.zeros((5, 5), dtype=np.int64)
    cm[0, 0] = 90
    cm[0, 1] = 10
    sens = sensitivity(cm)
    assert sens[0] == 0.9
    assert np.isnan(sens[1:]).all()  # absent classes are undefined, not zero


def test_confusion_matrix_rejects_bad_labels():
    with pytest.raises(ValueError):
        confusion_matrix(np.array([0, 9]), np.array([0, 0]))


def test_class_fractions():
    labels = np.array([[0, 1], [1, 1]])
    assert np.allclose(class_fractions(labels), [0.25, 0.75, 0, 0, 0])


# ---------------------------------------------------------------- folds


def test_fold_sizes_269_images():
    folds = make_folds(269, 5, seed=0)
    assert sorted(len(f) for f in folds) == [53, 54, 54, 54, 54]
    joined = np.sort(np.concatenate(folds))
    assert np.array_equal(joined, np.arange(269))


def test_fold_sizes_25_images():
    folds = make_folds(25, 5, seed=1)
    assert [len(f) for f in folds] == [5, 5, 5, 5, 5]


def test_folds_deterministic_and_seed_sensitive():
    a = make_folds(30, 5, seed=3)
    b = make_folds(30, 5, seed=3)
    c = make_folds(30, 5, seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert any(not np.array_equal(x, y) for x, y in zip(a, c))


def test_folds_validate_inputs():
    with pytest.raises(ValueError):
        make_folds(3, 5, seed=0)


# ---------------------------------------------------------------- overlay


def test_overlay_palette_pin():
    image = np.full((2, 5), 77, dtype=np.uint8)
    pred = np.array([[BK, LT, FT, MT, CA]] * 2, dtype=np.uint8)
    scene = TissueScene(image=image, mask=np.ones((2, 5), bool), labels=None)
    rgb = make_overlay(scene, pred)
    assert rgb[0, 0].tolist() == [77, 77, 77]      # background keeps the source
    assert rgb[0, 1].tolist() == [255, 0, 0]       # lipid: red
    assert rgb[0, 2].tolist() == [0, 100, 0]       # fibrous: dark green
    assert rgb[0, 3].tolist() == [144, 238, 144]   # mixed: light green
    assert rgb[0, 4].tolist() == [255, 255, 255]   # calcified: white
    assert CLASS_COLORS[LT] == (255, 0, 0)


def test_report_and_csv(tmp_path):
    cm = np.diag([10, 10, 10, 10, 10])
    text = format_report(cm)
    assert "overall accuracy: 1.0000" in text
    assert "sensitivity[CA]: 1.0000" in text
    path = tmp_path / "cm.csv"
    write_confusion_csv(cm, path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",")[1:] == ["BK", "LT", "FT", "MT", "CA"]
    assert lines[1].split(",") == ["BK", "10", "0", "0", "0", "0"]


# ---------------------------------------------------------------- segmentation


def test_segment_image_covers_mask_only(rng):
    from octplaque.network import build_plaquenet

    side = 70
    image = rng.integers(0, 256, (side, side)).astype(np.uint8)
    mask = np.zeros((side, side), dtype=bool)
    mask[4:12, 4:40] = True  # includes pixels closer to the edge than a half patch
    scene = TissueScene(image=image, mask=mask, labels=None)
    net = build_plaquenet(seed=9)
    pred = segment_image(net, scene, batch_size=64)
    assert pred.shape == mask.shape
    assert np.all(pred[~mask] == BK)
    assert pred.dtype == np.uint8


def test_segment_empty_mask_raises():
    from octplaque.network import build_plaquenet

    scene = TissueScene(image=np.zeros((60, 60), np.uint8),
                        mask=np.zeros((60, 60), bool), labels=None)
    with pytest.raises(EmptyMaskError):
        segment_image(build_plaquenet(seed=0), scene)
