"""Patch sampling, class weighting, and rotation augmentation.

Training examples are 51x51 grayscale patches cut from the Cartesian tissue
scenes; the label of a patch is the class of its center pixel.  Eligible
centers are tissue-mask pixels far enough from the image edge that the full
patch fits without padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import MissingClassError, NoTissueError
from .network import NUM_CLASSES, PATCH_SIZE
from .preprocess import TissueScene

HALF = PATCH_SIZE // 2  # 25


def class_weights(label_counts: np.ndarray) -> np.ndarray:
    """Inverse-frequency weights, normalized to sum to 1.

    w_c = (1/n_c) / sum_k (1/n_k).  Every class must be present; silently
    weighting an absent class would divide by zero and poison the loss.
    """
    counts = np.asarray(label_counts, dtype=np.float64)
    if counts.shape != (NUM_CLASSES,):
        raise ValueError(f"expected {NUM_CLASSES} counts, got shape {counts.shape}")
    if (counts <= 0).any():
        missing = np.flatnonzero(counts <= 0).tolist()
        raise MissingClassError(f"no examples for class(es) {missing}")
    inv = 1.0 / counts
    return inv / inv.sum()


@dataclass
class PatchSample:
    """One training example: normalized patch + center-pixel class."""

    patch: np.ndarray  # [51, 51] float32 in [0, 1]
    label: int
    image_index: int
    center: tuple[int, int]


def eligible_centers(scene: TissueScene) -> np.ndarray:
    """[K, 2] (row, col) tissue pixels whose 51x51 patch fits in-bounds."""
    h, w = scene.mask.shape
    box = np.zeros_like(scene.mask)
    box[HALF : h - HALF, HALF : w - HALF] = True
    rows, cols = np.nonzero(scene.mask & box)
    if rows.size == 0:
        raise NoTissueError("no eligible patch centers in tissue mask")
    return np.stack([rows, cols], axis=1)


def cut_patch(image: np.ndarray, row: int, col: int) -> np.ndarray:
    patch = image[row - HALF : row + HALF + 1, col - HALF : col + HALF + 1]
    return patch.astype(np.float32) / 255.0


def sample_training_batch(
    scenes: list[TissueScene],
    batch_size: int,
    rng: np.random.Generator,
    centers_per_scene: list[np.ndarray] | None = None,
) -> list[PatchSample]:
    """Draw a batch, visiting images round-robin with uniform random centers."""
    if centers_per_scene is None:
        centers_per_scene = [eligible_centers(s) for s in scenes]
    samples = []
    for i in range(batch_size):
        idx = i % len(scenes)
        centers = centers_per_scene[idx]
        r, c = centers[rng.integers(0, centers.shape[0])]
        scene = scenes[idx]
        samples.append(
            PatchSample(
                patch=cut_patch(scene.image, r, c),
                label=int(scene.labels[r, c]),
                image_index=idx,
                center=(int(r), int(c)),
            )
        )
    return samples


def batch_arrays(samples: list[PatchSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into network inputs: [N, 1, 51, 51] f32 and [N] int labels."""
    x = np.stack([s.patch for s in samples])[:, None, :, :]
    y = np.array([s.label for s in samples], dtype=np.int64)
    return np.ascontiguousarray(x, dtype=np.float32), y


def rotate_patch(patch: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the patch center, bilinear, keeping the 51x51 frame."""
    if angle_deg == 0.0:
        return patch
    out = ndimage.rotate(
        patch, angle_deg, reshape=False, order=1, mode="nearest", prefilter=False
    )
    return np.clip(out, 0.0, 1.0).astype(patch.dtype)


def augment_batch(
    samples: list[PatchSample], rng: np.random.Generator, max_angle_deg: float = 50.0
) -> list[PatchSample]:
    """Fresh random rotation in [0, max_angle] per sample; labels unchanged."""
    out = []
    for s in samples:
        angle = float(rng.uniform(0.0, max_angle_deg))
        out.append(
            PatchSample(
                patch=rotate_patch(s.patch, angle),
                label=s.label,
                image_index=s.image_index,
                center=s.center,
            )
        )
    return out


def build_validation_set(
    scenes: list[TissueScene],
    rng: np.random.Generator,
    per_image: int = 1000,
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed validation pool: ``per_image`` random eligible patches per image."""
    xs, ys = [], []
    for idx, scene in enumerate(scenes):
        centers = eligible_centers(scene)
        picks = rng.integers(0, centers.shape[0], size=per_image)
        for r, c in centers[picks]:
            xs.append(cut_patch(scene.image, r, c))
            ys.append(int(scene.labels[r, c]))
    x = np.stack(xs)[:, None, :, :].astype(np.float32)
    return np.ascontiguousarray(x), np.array(ys, dtype=np.int64)
