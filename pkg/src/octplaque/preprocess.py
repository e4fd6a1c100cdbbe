"""Tissue-area extraction from polar OCT frames.

Pipeline: Otsu threshold -> lumen border trace -> fixed-depth border
expansion -> tissue mask -> polar-to-Cartesian resampling.

Polar images are [height, width] uint8 arrays: each column is one A-line,
row 0 is the side nearest the rotation center, the bottom rows are the outer
tissue.  ``pixel_pitch_mm`` is the physical radial size of one pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateHistogramError, NoTissueError, ShapeError

BORDER_EXPANSION_MM = 1.5

BK, LT, FT, MT, CA = 0, 1, 2, 3, 4
CLASS_NAMES = ("BK", "LT", "FT", "MT", "CA")
NUM_CLASSES = 5


@dataclass
class PolarImage:
    """One polar OCT frame plus its radial pixel pitch."""

    pixels: np.ndarray  # uint8 [height, width]
    pixel_pitch_mm: float

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2:
            raise ShapeError(f"polar image must be 2-D, got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise ShapeError(f"polar image must be uint8, got {self.pixels.dtype}")
        if not (np.isfinite(self.pixel_pitch_mm) and self.pixel_pitch_mm > 0):
            raise ValueError(f"pixel_pitch_mm must be positive, got {self.pixel_pitch_mm}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class LumenBorder:
    """Per-column border row index plus a per-column validity flag.

    ``rows`` holds the traced (or interpolated) row for every column;
    ``valid`` marks columns where a suprathreshold pixel was actually found.
    """

    rows: np.ndarray  # int [width]
    valid: np.ndarray  # bool [width]


def otsu_threshold(image: PolarImage | np.ndarray) -> int:
    """Gray level t in [0, 255] maximizing between-class variance.

    Ties are broken toward the smallest t.  Foreground is defined as pixels
    strictly greater than t.
    """
    pixels = image.pixels if isinstance(image, PolarImage) else np.asarray(image)
    hist = np.bincount(pixels.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    if np.count_nonzero(hist) < 2:
        raise DegenerateHistogramError(
            "Otsu threshold undefined for a single-gray-level image"
        )
    levels = np.arange(256, dtype=np.float64)
    # class 0 = levels <= t, class 1 = levels > t, for t = 0..255
    w0 = np.cumsum(hist)
    sum0 = np.cumsum(hist * levels)
    mu_total = sum0[-1] / total
    w1 = total - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = sum0 / w0
        mu1 = (sum0[-1] - sum0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = -1.0  # empty classes can never win
    return int(np.argmax(between))


def binarize(pixels: np.ndarray, threshold: int) -> np.ndarray:
    return pixels > threshold


def detect_lumen_border(image: PolarImage, threshold: int) -> LumenBorder:
    """First suprathreshold row per column, scanning from the top.

    Columns with no suprathreshold pixel (guidewire shadow) are filled by
    circular linear interpolation between the nearest valid columns.
    """
    binary = binarize(image.pixels, threshold)
    has_any = binary.any(axis=0)
    if not has_any.any():
        raise NoTissueError("no column contains a suprathreshold pixel")
    first = binary.argmax(axis=0)
    rows = first.astype(np.float64)
    if not has_any.all():
        width = image.width
        valid_idx = np.flatnonzero(has_any)
        for col in np.flatnonzero(~has_any):
            # nearest valid neighbors, wrapping around the angular axis
            right_pos = np.searchsorted(valid_idx, col) % len(valid_idx)
            left_pos = right_pos - 1
            left, right = valid_idx[left_pos], valid_idx[right_pos]
            dist_left = (col - left) % width
            span = (right - left) % width
            if span == 0:  # single valid column
                rows[col] = rows[left]
            else:
                frac = dist_left / span
                rows[col] = (1 - frac) * rows[left] + frac * rows[right]
    return LumenBorder(
        rows=np.rint(rows).astype(np.int64),
        valid=has_any,
    )


def expansion_depth_px(pixel_pitch_mm: float, depth_mm: float = BORDER_EXPANSION_MM) -> int:
    """Physical expansion depth in pixels, rounded to nearest."""
    return int(np.floor(depth_mm / pixel_pitch_mm + 0.5))


def expand_border(border: LumenBorder, image: PolarImage) -> np.ndarray:
    """Boolean tissue mask: rows [inner, inner + depth] per column, clamped."""
    depth = expansion_depth_px(image.pixel_pitch_mm)
    inner = border.rows
    outer = np.minimum(inner + depth, image.height - 1)
    r = np.arange(image.height)[:, None]
    return (r >= inner[None, :]) & (r <= outer[None, :])


def cartesian_side(polar_height: int) -> int:
    return 2 * polar_height + 1


def _polar_coords(height: int, width: int):
    side = cartesian_side(height)
    center = height
    dy, dx = np.mgrid[0:side, 0:side].astype(np.float64)
    dy -= center
    dx -= center
    r = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx) % (2 * np.pi)
    col = phi / (2 * np.pi) * width
    return r, col


def polar_to_cartesian(
    pixels: np.ndarray, interp: str = "bilinear", fill: float = 0
) -> np.ndarray:
    """Resample a polar [height, width] raster onto a Cartesian square.

    The output is (2*height+1) per side with the r=0 point at the center
    pixel; radius maps to row index, angle wraps around the column axis.
    ``interp`` is 'bilinear' (intensities) or 'nearest' (labels/masks);
    radii beyond the outermost row take ``fill``.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ShapeError(f"expected a 2-D raster, got {pixels.shape}")
    height, width = pixels.shape
    if width < 4:
        raise ShapeError("polar raster needs >= 4 A-lines")
    r, col = _polar_coords(height, width)
    inside = r <= height - 1
    if interp == "nearest":
        rr = np.rint(r).astype(np.int64)
        cc = np.rint(col).astype(np.int64) % width
        rr_in = np.clip(rr, 0, height - 1)
        out = pixels[rr_in, cc]
        out = np.where(r <= height - 1 + 0.5, out, np.asarray(fill, pixels.dtype))
        return out.astype(pixels.dtype)
    if interp != "bilinear":
        raise ValueError(f"unknown interpolation {interp!r}")
    r0 = np.clip(np.floor(r).astype(np.int64), 0, height - 1)
    r1 = np.minimum(r0 + 1, height - 1)
    fr = np.clip(r - r0, 0.0, 1.0)
    c0 = np.floor(col).astype(np.int64) % width
    c1 = (c0 + 1) % width
    fc = col - np.floor(col)
    vals = (
        pixels[r0, c0] * (1 - fr) * (1 - fc)
        + pixels[r0, c1] * (1 - fr) * fc
        + pixels[r1, c0] * fr * (1 - fc)
        + pixels[r1, c1] * fr * fc
    )
    out = np.where(inside, vals, float(fill))
    if np.issubdtype(pixels.dtype, np.integer):
        return np.clip(np.rint(out), 0, 255).astype(pixels.dtype)
    return out.astype(pixels.dtype)


@dataclass
class TissueScene:
    """Everything the sampler/evaluator needs about one preprocessed frame."""

    image: np.ndarray  # uint8 Cartesian intensity
    mask: np.ndarray  # bool Cartesian tissue mask
    labels: np.ndarray | None  # uint8 Cartesian label map, if ground truth exists
    # provenance of the geometric step; absent when a scene is reloaded from disk
    threshold: int | None = None
    border: LumenBorder | None = None


def extract_tissue_scene(
    polar: PolarImage, polar_labels: np.ndarray | None = None
) -> TissueScene:
    """Run the full step-1 pipeline on one polar frame."""
    threshold = otsu_threshold(polar)
    border = detect_lumen_border(polar, threshold)
    polar_mask = expand_border(border, polar)
    image = polar_to_cartesian(polar.pixels, "bilinear")
    mask = polar_to_cartesian(polar_mask.astype(np.uint8), "nearest").astype(bool)
    labels = None
    if polar_labels is not None:
        if polar_labels.shape != polar.pixels.shape:
            raise ShapeError(
                f"label map shape {polar_labels.shape} != image {polar.pixels.shape}"
            )
        labels = polar_to_cartesian(polar_labels.astype(np.uint8), "nearest", fill=BK)
    return TissueScene(
        image=image, mask=mask, labels=labels, threshold=threshold, border=border
    )
