"""8-bit grayscale image I/O (PGM and PNG) plus pixel-pitch sidecar files.

PGM is the preferred write format: the binary P5 encoding is byte-stable, so
regenerating a dataset from the same seed reproduces files exactly.
Sidecars are key-value text files holding ``pixel_pitch_mm = <float>``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError


def write_pgm(pixels: np.ndarray, path) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise ValueError(f"PGM writer needs a 2-D array, got {pixels.shape}")
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(pixels.tobytes())


def read_gray(path) -> np.ndarray:
    """Read a PGM or PNG file as a uint8 [height, width] array."""
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def write_gray(pixels: np.ndarray, path) -> None:
    """Write uint8 grayscale; format chosen by extension (.pgm or .png)."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(pixels, path)
    elif path.suffix.lower() == ".png":
        Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path)
    else:
        raise ValueError(f"unsupported image extension: {path.suffix}")


def write_rgb(pixels: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path)


def sidecar_path(image_path) -> Path:
    return Path(image_path).with_suffix(".meta")


def write_sidecar(path, pixel_pitch_mm: float) -> None:
    Path(path).write_text(f"pixel_pitch_mm = {pixel_pitch_mm!r}\n")


def read_sidecar(path) -> float:
    """Parse ``pixel_pitch_mm`` from a sidecar metadata file."""
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: malformed sidecar line {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "pixel_pitch_mm":
            try:
                pitch = float(value)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad pixel_pitch_mm {value!r}") from exc
            if not pitch > 0:
                raise ConfigError(f"{path}: pixel_pitch_mm must be positive")
            return pitch
    raise ConfigError(f"{path}: missing pixel_pitch_mm")
