"""Per-pixel cloud scoring and clear/cloudy crop labelling.

The score is a brightness + whiteness heuristic standing in for a full
cloud detector: clouds are bright and nearly colourless.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from stcloud.errors import ContractError
from stcloud.imagecore import U8, MultispectralImage

DEFAULT_THRESHOLD = 0.8
DEFAULT_WEIGHTS = (0.5, 0.5)
DEFAULT_BLUE_RATIO = 1.2
OCEAN_MIN_BLUE = 20

CLEAR_MAX = 0.01
CLOUDY_MIN = 0.10
CLOUDY_MAX = 0.30


class Label(str, Enum):
    CLEAR = "Clear"
    CLOUDY = "Cloudy"
    REJECTED = "Rejected"


@dataclass(frozen=True, eq=False)
class CloudMask:
    scores: np.ndarray
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2:
            raise ContractError(f"cloud scores must be 2-D, got shape {scores.shape}")
        if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
            raise ContractError("cloud scores must lie in [0, 1]")
        if not 0.0 < self.threshold < 1.0:
            raise ContractError("threshold must lie in (0, 1)")
        scores = scores.copy()
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    @property
    def binary(self) -> np.ndarray:
        return self.scores >= self.threshold

    @classmethod
    def from_binary(cls, cloudy: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> CloudMask:
        return cls(np.asarray(cloudy, dtype=np.float64), threshold)


@dataclass(frozen=True)
class CropLabel:
    label: Label
    cover_fraction: float
    ocean_fraction: float


def _rgb(img: MultispectralImage) -> np.ndarray:
    if img.dtype != U8:
        raise ContractError("cloud scoring expects a u8 image")
    if img.channels < 3:
        raise ContractError(f"cloud scoring needs RGB channels, got {img.channels}")
    return img.samples[:, :, :3].astype(np.float64)


def cloud_score(
    img: MultispectralImage,
    threshold: float = DEFAULT_THRESHOLD,
    weights: tuple[float, float] = DEFAULT_WEIGHTS,
) -> CloudMask:
    rgb = _rgb(img)
    lo = rgb.min(axis=2)
    hi = rgb.max(axis=2)
    brightness = lo / 255.0
    whiteness = 1.0 - (hi - lo) / 255.0
    score = np.clip(weights[0] * brightness + weights[1] * whiteness, 0.0, 1.0)
    return CloudMask(score, threshold)


def cover_fraction(mask: CloudMask) -> float:
    return float(np.count_nonzero(mask.binary)) / mask.scores.size


def ocean_fraction(
    img: MultispectralImage,
    mask: CloudMask | None = None,
    blue_ratio: float = DEFAULT_BLUE_RATIO,
) -> float:
    """Fraction of cloud-free pixels that look like open water.

    A pixel counts as water when blue dominates red and green by
    ``blue_ratio`` and exceeds a small absolute floor.
    """
    rgb = _rgb(img)
    if mask is None:
        mask = cloud_score(img)
    r, g, b = rgb[:, :, 0], rgb[:, :, 1], rgb[:, :, 2]
    water = (b > blue_ratio * r) & (b > blue_ratio * g) & (b > OCEAN_MIN_BLUE)
    visible = ~mask.binary
    n_visible = np.count_nonzero(visible)
    if n_visible == 0:
        return 0.0
    return float(np.count_nonzero(water & visible)) / n_visible


def label_for_cover(cover: float) -> Label:
    if cover < CLEAR_MAX:
        return Label.CLEAR
    if CLOUDY_MIN <= cover <= CLOUDY_MAX:
        return Label.CLOUDY
    return Label.REJECTED


def classify_crop(
    img: MultispectralImage,
    threshold: float = DEFAULT_THRESHOLD,
    weights: tuple[float, float] = DEFAULT_WEIGHTS,
    blue_ratio: float = DEFAULT_BLUE_RATIO,
) -> CropLabel:
    mask = cloud_score(img, threshold, weights)
    cover = cover_fraction(mask)
    return CropLabel(label_for_cover(cover), cover, ocean_fraction(img, mask, blue_ratio))
