"""Multispectral image container, value normalisation and the MSI1 file format.

MSI1 layout (little-endian)::

    0-3    b"MSI1"
    4-5    width   (u16)
    6-7    height  (u16)
    8      channels (u8)
    9      dtype code (0 = u8, 1 = f32 in [0, 1], 2 = f32 in [-1, 1])
    10-19  reserved, zero
    20-    samples, row-major, channel-interleaved
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from stcloud.errors import ContractError, CorruptionError, FormatError

MAGIC = b"MSI1"
HEADER_SIZE = 20
_HEADER = struct.Struct("<4sHHBB10x")

U8 = "u8"
UNIT = "unit"
SIGNED = "signed"

DTYPE_CODES = {U8: 0, UNIT: 1, SIGNED: 2}
_CODE_TO_DTYPE = {v: k for k, v in DTYPE_CODES.items()}
_NUMPY_DTYPE = {U8: np.dtype("<u1"), UNIT: np.dtype("<f4"), SIGNED: np.dtype("<f4")}
_RANGES = {U8: (0, 255), UNIT: (0.0, 1.0), SIGNED: (-1.0, 1.0)}
VALID_CHANNELS = (1, 3, 4)


@dataclass(frozen=True, eq=False)
class MultispectralImage:
    """An immutable ``height x width x channels`` sample grid.

    ``samples`` is stored as a read-only numpy array of shape (H, W, C);
    ``dtype`` is one of ``"u8"``, ``"unit"`` or ``"signed"``.
    """

    samples: np.ndarray
    dtype: str = U8

    def __post_init__(self):
        if self.dtype not in _NUMPY_DTYPE:
            raise ContractError(f"unknown image dtype {self.dtype!r}")
        arr = np.asarray(self.samples)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ContractError(f"samples must be (H, W, C), got shape {arr.shape}")
        if arr.shape[2] not in VALID_CHANNELS:
            raise ContractError(f"channels must be one of {VALID_CHANNELS}, got {arr.shape[2]}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ContractError("image must have at least one pixel")
        want = _NUMPY_DTYPE[self.dtype]
        if self.dtype == U8:
            if not np.issubdtype(arr.dtype, np.integer):
                raise ContractError(f"u8 image needs integer samples, got {arr.dtype}")
            if arr.dtype != np.uint8 and (arr.min() < 0 or arr.max() > 255):
                raise ContractError("u8 samples must lie in [0, 255]")
        else:
            lo, hi = _RANGES[self.dtype]
            if not np.all(np.isfinite(arr)):
                raise ContractError("float samples must be finite")
            if arr.size and (arr.min() < lo or arr.max() > hi):
                raise ContractError(f"{self.dtype} samples must lie in [{lo}, {hi}]")
        arr = np.ascontiguousarray(arr, dtype=want)
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def channels(self) -> int:
        return self.samples.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.samples.shape

    def rgb(self) -> MultispectralImage:
        if self.channels < 3:
            raise ContractError("image has no RGB channels")
        return MultispectralImage(self.samples[:, :, :3], self.dtype)

    def select_channels(self, n: int) -> MultispectralImage:
        if n > self.channels:
            raise ContractError(f"requested {n} channels from a {self.channels}-channel image")
        return MultispectralImage(self.samples[:, :, :n], self.dtype)

    def __eq__(self, other):
        if not isinstance(other, MultispectralImage):
            return NotImplemented
        return self.dtype == other.dtype and np.array_equal(self.samples, other.samples)

    def __hash__(self):
        return hash((self.dtype, self.samples.shape, self.samples.tobytes()))


def file_size(width: int, height: int, channels: int, dtype: str = U8) -> int:
    return HEADER_SIZE + width * height * channels * _NUMPY_DTYPE[dtype].itemsize


def save_image(img: MultispectralImage, path) -> None:
    header = _HEADER.pack(MAGIC, img.width, img.height, img.channels, DTYPE_CODES[img.dtype])
    with open(path, "wb") as f:
        f.write(header)
        f.write(img.samples.tobytes(order="C"))


def load_image(path) -> MultispectralImage:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < HEADER_SIZE:
        raise CorruptionError(f"{path}: truncated header")
    _, width, height, channels, code = _HEADER.unpack_from(data)
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if channels not in VALID_CHANNELS:
        raise FormatError(f"{path}: unsupported channel count {channels}")
    dtype = _CODE_TO_DTYPE[code]
    expected = file_size(width, height, channels, dtype)
    if len(data) != expected:
        raise CorruptionError(f"{path}: expected {expected} bytes, found {len(data)}")
    samples = np.frombuffer(data, dtype=_NUMPY_DTYPE[dtype], offset=HEADER_SIZE)
    samples = samples.reshape(height, width, channels)
    try:
        return MultispectralImage(samples, dtype)
    except ContractError as exc:
        raise CorruptionError(f"{path}: {exc}") from exc


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def to_u8(values: np.ndarray) -> np.ndarray:
    """Round half-up and clamp float values onto the u8 grid."""
    return np.clip(round_half_up(values), 0, 255).astype(np.uint8)


def normalize(img: MultispectralImage) -> MultispectralImage:
    if img.dtype != U8:
        raise ContractError(f"normalize expects a u8 image, got {img.dtype}")
    values = img.samples.astype(np.float32) / np.float32(127.5) - np.float32(1.0)
    return MultispectralImage(np.clip(values, -1.0, 1.0), SIGNED)


def denormalize(img: MultispectralImage) -> MultispectralImage:
    if img.dtype != SIGNED:
        raise ContractError(f"denormalize expects a signed-float image, got {img.dtype}")
    values = np.clip(img.samples.astype(np.float64), -1.0, 1.0) * 127.5 + 127.5
    return MultispectralImage(to_u8(values), U8)


def export_png(img: MultispectralImage, path) -> list[Path]:
    """Write ``img`` as PNG; 4-channel images also emit ``<stem>_ir.png``.

    Returns the list of files written.
    """
    from PIL import Image

    if img.dtype != U8:
        raise ContractError("PNG export needs a u8 image")
    path = Path(path)
    if img.channels == 1:
        Image.fromarray(img.samples[:, :, 0], mode="L").save(path)
        return [path]
    if img.channels == 3:
        Image.fromarray(img.samples, mode="RGB").save(path)
        return [path]
    if img.channels == 4:
        ir_path = path.with_name(f"{path.stem}_ir{path.suffix or '.png'}")
        Image.fromarray(np.ascontiguousarray(img.samples[:, :, :3]), mode="RGB").save(path)
        Image.fromarray(np.ascontiguousarray(img.samples[:, :, 3]), mode="L").save(ir_path)
        return [path, ir_path]
    raise ContractError(f"cannot export a {img.channels}-channel image as PNG")
