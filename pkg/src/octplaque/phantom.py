"""Synthetic polar-OCT phantoms with exact per-pixel ground truth.

A phantom is a dark background with a wobbling lumen border, a tissue band
below the border tiled with contiguous angular sectors of the four tissue
classes, and faint catheter-artifact arcs above the border.  Class textures
are Gaussian intensity plus smooth multiplicative speckle.  Everything is a
pure function of (spec, rng), so datasets regenerate byte-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import imagefiles
from .errors import PhantomSpecError
from .preprocess import BK, LT, FT, MT, CA, PolarImage

TISSUE_CLASSES = (LT, FT, MT, CA)


@dataclass
class ClassTexture:
    mean: float
    noise_std: float
    speckle_strength: float = 0.05
    speckle_grain: float = 2.0


DEFAULT_TEXTURES = {
    LT: ClassTexture(mean=120.0, noise_std=4.0, speckle_strength=0.02),
    FT: ClassTexture(mean=160.0, noise_std=4.0, speckle_strength=0.02),
    MT: ClassTexture(mean=200.0, noise_std=4.0, speckle_strength=0.02),
    CA: ClassTexture(mean=240.0, noise_std=4.0, speckle_strength=0.02),
}


@dataclass
class PhantomSpec:
    width: int = 192  # A-lines
    height: int = 80  # samples per A-line
    pixel_pitch_mm: float = 0.01
    lumen_base_radius: float = 16.0
    lumen_wobble_amplitude: float = 4.0
    lumen_wobble_cycles: int = 3
    tissue_depth_px: int = 40
    # angular fractions of the four tissue classes (LT, FT, MT, CA)
    class_fractions: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    textures: dict[int, ClassTexture] = field(
        default_factory=lambda: {k: ClassTexture(**asdict(v)) for k, v in DEFAULT_TEXTURES.items()}
    )
    background_mean: float = 3.0
    background_std: float = 1.5
    artifact_level: float = 20.0
    artifact_arcs: int = 2

    def validate(self) -> None:
        if self.width < 8 or self.height < 8:
            raise PhantomSpecError("phantom dimensions too small")
        if not self.pixel_pitch_mm > 0:
            raise PhantomSpecError("pixel_pitch_mm must be positive")
        fr = np.asarray(self.class_fractions, dtype=np.float64)
        if fr.shape != (4,) or (fr < 0).any():
            raise PhantomSpecError("class_fractions must be 4 non-negative values")
        if abs(fr.sum() - 1.0) > 1e-9:
            raise PhantomSpecError(f"class_fractions sum to {fr.sum()}, expected 1")
        cols = np.rint(fr * self.width)
        if ((fr > 0) & (cols < 1)).any():
            raise PhantomSpecError(
                "a nonzero class fraction maps to less than one A-line"
            )
        for cls in TISSUE_CLASSES:
            if cls not in self.textures:
                raise PhantomSpecError(f"missing texture for class {cls}")
            t = self.textures[cls]
            if not (0 <= t.mean <= 255):
                raise PhantomSpecError(f"class {cls} mean {t.mean} outside [0, 255]")
        # learnability: class means pairwise separated by >= 2x their noise std
        for a in TISSUE_CLASSES:
            for b in TISSUE_CLASSES:
                if a < b:
                    ta, tb = self.textures[a], self.textures[b]
                    gap = abs(ta.mean - tb.mean)
                    if gap < 2.0 * max(ta.noise_std, tb.noise_std):
                        raise PhantomSpecError(
                            f"classes {a} and {b} are not separable: "
                            f"mean gap {gap} < 2x noise std"
                        )
        max_inner = self.lumen_base_radius + self.lumen_wobble_amplitude
        if max_inner + self.tissue_depth_px > self.height - 1:
            raise PhantomSpecError("tissue band does not fit below the lumen border")
        if self.lumen_base_radius - self.lumen_wobble_amplitude < 1:
            raise PhantomSpecError("lumen border reaches the top row")


_SPEC_SCALARS = {
    "width": int, "height": int, "pixel_pitch_mm": float,
    "lumen_base_radius": float, "lumen_wobble_amplitude": float,
    "lumen_wobble_cycles": int, "tissue_depth_px": int,
    "background_mean": float, "background_std": float,
    "artifact_level": float, "artifact_arcs": int,
}
_TEX_SUFFIX = {"lt": LT, "ft": FT, "mt": MT, "ca": CA}


def load_phantom_spec(path) -> PhantomSpec:
    """Read a ``key = value`` spec file.

    Scalar keys mirror the PhantomSpec fields; ``class_fractions`` takes four
    comma-separated values (LT, FT, MT, CA); per-class texture overrides use
    ``mean_lt`` / ``noise_std_lt`` etc.  Unknown keys are an error.
    """
    spec = PhantomSpec()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PhantomSpecError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key in _SPEC_SCALARS:
                setattr(spec, key, _SPEC_SCALARS[key](value))
            elif key == "class_fractions":
                parts = tuple(float(v) for v in value.split(","))
                if len(parts) != 4:
                    raise ValueError("need 4 values")
                spec.class_fractions = parts
            elif "_" in key and key.rsplit("_", 1)[1] in _TEX_SUFFIX:
                field_name, suffix = key.rsplit("_", 1)
                if field_name not in ("mean", "noise_std", "speckle_strength",
                                      "speckle_grain"):
                    raise PhantomSpecError(f"{path}:{lineno}: unknown key {key!r}")
                setattr(spec.textures[_TEX_SUFFIX[suffix]], field_name, float(value))
            else:
                raise PhantomSpecError(f"{path}:{lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise PhantomSpecError(
                f"{path}:{lineno}: bad value for {key}: {value!r}"
            ) from exc
    spec.validate()
    return spec


def _sector_columns(fractions, width: int, offset: int) -> list[np.ndarray]:
    """Contiguous circular column ranges per class, largest-remainder rounding."""
    fr = np.asarray(fractions, dtype=np.float64)
    counts = np.floor(fr * width).astype(int)
    remainder = fr * width - counts
    for _ in range(width - counts.sum()):
        i = int(np.argmax(remainder))
        counts[i] += 1
        remainder[i] = -1
    ranges = []
    start = offset % width
    for n in counts:
        cols = (start + np.arange(n)) % width
        ranges.append(cols)
        start += n
    return ranges


def generate_phantom(
    spec: PhantomSpec, rng: np.random.Generator
) -> tuple[PolarImage, np.ndarray]:
    """Render one phantom; returns (polar image, polar label map)."""
    spec.validate()
    h, w = spec.height, spec.width
    cols = np.arange(w)
    phase = rng.uniform(0.0, w)
    border = np.rint(
        spec.lumen_base_radius
        + spec.lumen_wobble_amplitude
        * np.sin(2 * np.pi * spec.lumen_wobble_cycles * (cols + phase) / w)
    ).astype(np.int64)

    labels = np.full((h, w), BK, dtype=np.uint8)
    sector_offset = int(rng.integers(0, w))
    rows = np.arange(h)[:, None]
    for cls, cls_cols in zip(TISSUE_CLASSES, _sector_columns(spec.class_fractions, w, sector_offset)):
        if cls_cols.size == 0:
            continue
        band = (rows >= border[cls_cols][None, :]) & (
            rows < np.minimum(border[cls_cols] + spec.tissue_depth_px, h)[None, :]
        )
        sub = labels[:, cls_cols]
        sub[band] = cls
        labels[:, cls_cols] = sub

    # background with faint catheter arcs above the lumen border
    img = rng.normal(spec.background_mean, spec.background_std, (h, w))
    min_border = int(border.min())
    for _ in range(spec.artifact_arcs):
        if min_border < 8:
            break
        arc_row = int(rng.integers(2, min_border - 4))
        arc_start = int(rng.integers(0, w))
        arc_len = int(rng.integers(w // 8, w // 2))
        arc_cols = (arc_start + np.arange(arc_len)) % w
        img[arc_row : arc_row + 2, arc_cols] = spec.artifact_level + rng.normal(
            0.0, 1.0, (2, arc_len)
        )

    # class textures: Gaussian intensity times smooth multiplicative speckle
    base_noise = rng.standard_normal((h, w))
    speckle_src = rng.standard_normal((h, w))
    for cls in TISSUE_CLASSES:
        region = labels == cls
        if not region.any():
            continue
        t = spec.textures[cls]
        speckle = gaussian_filter(speckle_src, t.speckle_grain)
        denom = max(speckle.std(), 1e-9)
        values = (t.mean + t.noise_std * base_noise) * (
            1.0 + t.speckle_strength * speckle / denom
        )
        img[region] = values[region]
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return PolarImage(pixels=pixels, pixel_pitch_mm=spec.pixel_pitch_mm), labels


def image_seed(master_seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([master_seed, index])))


def generate_dataset(spec: PhantomSpec, count: int, out_dir, master_seed: int) -> list[str]:
    """Write ``count`` phantom triples (image, labels, sidecar); returns ids."""
    if count < 1:
        raise PhantomSpecError(f"count must be >= 1, got {count}")
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(count):
        rng = image_seed(master_seed, i)
        polar, labels = generate_phantom(spec, rng)
        stem = f"phantom_{i:03d}"
        imagefiles.write_pgm(polar.pixels, out / f"{stem}.pgm")
        imagefiles.write_pgm(labels, out / f"{stem}_labels.pgm")
        imagefiles.write_sidecar(out / f"{stem}.meta", spec.pixel_pitch_mm)
        ids.append(stem)
    return ids
