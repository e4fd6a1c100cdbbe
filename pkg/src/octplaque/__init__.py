"""Plaque tissue characterization for intravascular OCT pullback frames.

The pipeline has two steps: a geometric pass that isolates the tissue area
behind the lumen border and resamples it to Cartesian coordinates, and a
patch-based convolutional classifier that assigns each tissue pixel one of
five classes (background, lipid, fibrous, mixed, calcified).
"""

__version__ = "0.1.0"

from .errors import OctPlaqueError
from .network import NUM_CLASSES, PATCH_SIZE, PlaqueNet, build_plaquenet
from .phantom import PhantomSpec, generate_dataset, generate_phantom
from .preprocess import (
    BK,
    CA,
    CLASS_NAMES,
    FT,
    LT,
    MT,
    PolarImage,
    TissueScene,
    extract_tissue_scene,
)
from .training import TrainConfig, train
from .evaluation import cross_validate, segment_image

__all__ = [
    "__version__",
    "OctPlaqueError",
    "NUM_CLASSES",
    "PATCH_SIZE",
    "PlaqueNet",
    "build_plaquenet",
    "PhantomSpec",
    "generate_dataset",
    "generate_phantom",
    "BK", "LT", "FT", "MT", "CA",
    "CLASS_NAMES",
    "PolarImage",
    "TissueScene",
    "extract_tissue_scene",
    "TrainConfig",
    "train",
    "cross_validate",
    "segment_image",
]
