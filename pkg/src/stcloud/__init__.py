"""Cloud removal for multispectral satellite crops using spatiotemporal GANs."""

from stcloud.errors import (
    CapacityError,
    ContractError,
    CorruptionError,
    FormatError,
    ManifestParseError,
    ShapeError,
    TrainingFault,
)
from stcloud.imagecore import MultispectralImage, load_image, save_image

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "ContractError",
    "CorruptionError",
    "FormatError",
    "ManifestParseError",
    "MultispectralImage",
    "ShapeError",
    "TrainingFault",
    "load_image",
    "save_image",
]
