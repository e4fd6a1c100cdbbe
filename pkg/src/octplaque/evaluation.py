"""Dense segmentation, metrics, cross-validation, and color overlays.

Segmentation classifies every tissue-mask pixel by running the patch network
on the 51x51 neighborhood of each pixel (edge neighborhoods come from a
reflect-padded copy).  Metrics are computed from an explicit confusion
matrix so every number can be re-derived from raw (true, predicted) pairs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptyMaskError
from .network import NUM_CLASSES, PATCH_SIZE, PlaqueNet, build_plaquenet
from .preprocess import BK, LT, FT, MT, CA, CLASS_NAMES, TissueScene
from .sampling import HALF

# overlay palette; background keeps the grayscale source pixel
CLASS_COLORS = {
    LT: (255, 0, 0),      # red
    FT: (0, 100, 0),      # dark green
    MT: (144, 238, 144),  # light green
    CA: (255, 255, 255),  # white
}


def segment_image(
    net: PlaqueNet, scene: TissueScene, batch_size: int = 216
) -> np.ndarray:
    """Per-pixel class map; background outside the tissue mask."""
    if not scene.mask.any():
        raise EmptyMaskError("tissue mask is empty; nothing to segment")
    padded = (
        np.pad(scene.image, HALF, mode="reflect").astype(np.float32) / 255.0
    )
    rows, cols = np.nonzero(scene.mask)
    out = np.full(scene.mask.shape, BK, dtype=np.uint8)
    for start in range(0, rows.size, batch_size):
        r = rows[start : start + batch_size]
        c = cols[start : start + batch_size]
        patches = np.empty((r.size, 1, PATCH_SIZE, PATCH_SIZE), dtype=np.float32)
        for i in range(r.size):
            patches[i, 0] = padded[r[i] : r[i] + PATCH_SIZE, c[i] : c[i] + PATCH_SIZE]
        probs = net.forward(patches, mode="inference")
        out[r, c] = np.argmax(probs, axis=1).astype(np.uint8)
    return out


def confusion_matrix(
    true_labels: np.ndarray, predicted: np.ndarray, num_classes: int = NUM_CLASSES
) -> np.ndarray:
    """[num_classes, num_classes] counts; rows are true, columns predicted."""
    t = np.asarray(true_labels).ravel()
    p = np.asarray(predicted).ravel()
    if t.shape != p.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {p.shape}")
    if t.size and (t.min() < 0 or t.max() >= num_classes
                   or p.min() < 0 or p.max() >= num_classes):
        raise ValueError("labels outside [0, num_classes)")
    cm = np.bincount(
        t.astype(np.int64) * num_classes + p.astype(np.int64),
        minlength=num_classes * num_classes,
    ).reshape(num_classes, num_classes)
    return cm


def sensitivity(cm: np.ndarray) -> np.ndarray:
    """Per-class TP / (TP + FN).  Classes absent from the truth are NaN,
    not zero — an absent class has no recall, rather than zero recall."""
    cm = np.asarray(cm, dtype=np.float64)
    row_sums = cm.sum(axis=1)
    out = np.full(cm.shape[0], np.nan)
    present = row_sums > 0
    out[present] = np.diag(cm)[present] / row_sums[present]
    return out


def overall_accuracy(cm: np.ndarray) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm) / total)


def class_fractions(labels: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    lab = labels[mask] if mask is not None else labels.ravel()
    counts = np.bincount(lab.ravel(), minlength=NUM_CLASSES)[:NUM_CLASSES]
    return counts / max(counts.sum(), 1)


def evaluate_scene(net: PlaqueNet, scene: TissueScene,
                   batch_size: int = 216) -> tuple[np.ndarray, np.ndarray]:
    """Segment one scene and score it against its label map (mask only)."""
    if scene.labels is None:
        raise ValueError("scene has no ground-truth labels")
    pred = segment_image(net, scene, batch_size)
    cm = confusion_matrix(scene.labels[scene.mask], pred[scene.mask])
    return pred, cm


def make_folds(n_items: int, n_folds: int, seed: int) -> list[np.ndarray]:
    """Shuffle item indices and split into n_folds near-equal parts.

    Sizes differ by at most one (e.g. 269 items, 5 folds -> 54/54/54/54/53).
    """
    if n_folds < 2 or n_folds > n_items:
        raise ValueError(f"need 2 <= n_folds <= n_items, got {n_folds}/{n_items}")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n_items)
    return [np.sort(part) for part in np.array_split(order, n_folds)]


@dataclass
class FoldResult:
    fold: int
    test_indices: np.ndarray
    confusion: np.ndarray
    best_val_accuracy: float
    best_iteration: int


@dataclass
class CrossValResult:
    folds: list[FoldResult]
    pooled_confusion: np.ndarray

    @property
    def accuracy(self) -> float:
        return overall_accuracy(self.pooled_confusion)

    @property
    def sensitivities(self) -> np.ndarray:
        return sensitivity(self.pooled_confusion)


def cross_validate(
    scenes: list[TissueScene],
    config,
    n_folds: int = 5,
    net_seed: int = 0,
    fold_seed: int = 0,
    progress=None,
) -> CrossValResult:
    """Leave-one-fold-out: train a fresh network per fold, score its test fold,
    and pool the confusion matrices."""
    from .training import train  # local import to avoid a cycle

    folds = make_folds(len(scenes), n_folds, fold_seed)
    results = []
    pooled = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for k, test_idx in enumerate(folds):
        test_set = set(test_idx.tolist())
        train_scenes = [s for i, s in enumerate(scenes) if i not in test_set]
        test_scenes = [scenes[i] for i in test_idx]
        net = build_plaquenet(seed=net_seed + k)
        fold_cfg = replace(config, seed=config.seed + k)
        res = train(net, train_scenes, test_scenes, fold_cfg, progress=progress)
        cm = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
        for scene in test_scenes:
            _, scene_cm = evaluate_scene(net, scene, config.batch_size)
            cm += scene_cm
        pooled += cm
        results.append(FoldResult(
            fold=k, test_indices=test_idx, confusion=cm,
            best_val_accuracy=res.best_val_accuracy,
            best_iteration=res.best_iteration,
        ))
        if progress is not None:
            progress({"fold": k, "fold_accuracy": overall_accuracy(cm)})
    return CrossValResult(folds=results, pooled_confusion=pooled)


def make_overlay(scene: TissueScene, predicted: np.ndarray) -> np.ndarray:
    """RGB visualization: tissue classes in their palette colors over the
    grayscale source image."""
    rgb = np.repeat(scene.image[:, :, None], 3, axis=2).astype(np.uint8)
    for cls, color in CLASS_COLORS.items():
        rgb[predicted == cls] = color
    return rgb


def write_confusion_csv(cm: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred"] + list(CLASS_NAMES))
        for name, row in zip(CLASS_NAMES, np.asarray(cm)):
            writer.writerow([name] + [int(v) for v in row])


def format_report(cm: np.ndarray) -> str:
    """Human-readable metric summary from a confusion matrix."""
    sens = sensitivity(cm)
    lines = [f"overall accuracy: {overall_accuracy(cm):.4f}"]
    for i, name in enumerate(CLASS_NAMES):
        val = "n/a (class absent)" if np.isnan(sens[i]) else f"{sens[i]:.4f}"
        lines.append(f"sensitivity[{name}]: {val}")
    lines.append(f"pixels scored: {int(np.asarray(cm).sum())}")
    return "\n".join(lines)
