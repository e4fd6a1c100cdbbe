"""On-disk layout for polar inputs and preprocessed Cartesian scenes.

Polar dataset directory (generator output / scanner export):
    <stem>.pgm          polar intensity image
    <stem>.meta         sidecar with the pixel pitch
    <stem>_labels.pgm   optional per-pixel ground truth

Preprocessed scene directory (``preprocess`` output):
    <stem>_cart.pgm     Cartesian intensity image
    <stem>_mask.pgm     tissue mask (0 / 255)
    <stem>_labels_cart.pgm  optional transformed ground truth
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import imagefiles
from .errors import UnusableImageError
from .preprocess import PolarImage, TissueScene


def polar_stems(in_dir) -> list[str]:
    """Image stems in a polar dataset directory, sorted for stable order."""
    root = Path(in_dir)
    stems = sorted(
        p.stem for p in root.glob("*.pgm") if not p.stem.endswith("_labels")
    )
    return stems


def load_polar(in_dir, stem: str) -> tuple[PolarImage, np.ndarray | None]:
    root = Path(in_dir)
    pixels = imagefiles.read_gray(root / f"{stem}.pgm")
    pitch = imagefiles.read_sidecar(root / f"{stem}.meta")
    labels_path = root / f"{stem}_labels.pgm"
    labels = imagefiles.read_gray(labels_path) if labels_path.exists() else None
    return PolarImage(pixels=pixels, pixel_pitch_mm=pitch), labels


def save_scene(scene: TissueScene, out_dir, stem: str) -> None:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    imagefiles.write_pgm(scene.image, root / f"{stem}_cart.pgm")
    imagefiles.write_pgm(
        scene.mask.astype(np.uint8) * 255, root / f"{stem}_mask.pgm"
    )
    if scene.labels is not None:
        imagefiles.write_pgm(scene.labels, root / f"{stem}_labels_cart.pgm")


def scene_stems(scene_dir) -> list[str]:
    root = Path(scene_dir)
    return sorted(
        p.stem[: -len("_cart")]
        for p in root.glob("*_cart.pgm")
        if not p.stem.endswith("_labels_cart")
    )


def load_scene(scene_dir, stem: str) -> TissueScene:
    root = Path(scene_dir)
    image = imagefiles.read_gray(root / f"{stem}_cart.pgm")
    mask_raw = imagefiles.read_gray(root / f"{stem}_mask.pgm")
    if image.shape != mask_raw.shape:
        raise UnusableImageError(
            f"{stem}: image {image.shape} and mask {mask_raw.shape} disagree"
        )
    labels_path = root / f"{stem}_labels_cart.pgm"
    labels = imagefiles.read_gray(labels_path) if labels_path.exists() else None
    return TissueScene(image=image, mask=mask_raw > 0, labels=labels)


def load_scenes(scene_dir) -> tuple[list[str], list[TissueScene]]:
    stems = scene_stems(scene_dir)
    if not stems:
        raise UnusableImageError(f"no preprocessed scenes found in {scene_dir}")
    return stems, [load_scene(scene_dir, s) for s in stems]
