"""8-bit RGB image buffers and the pixel-exact primitives built on them.

Everything downstream (markers, prompt variants, crops) goes through this
module, so the conventions here are deliberately rigid: row-major uint8 RGB,
BT.601 luma with round-half-up, clamp-to-edge Gaussian blur with a kernel
radius of ceil(3*sigma), and byte-deterministic PNG encoding.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

# BT.601 luma weights, in RGB order.
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)

# Pinned encoder settings; changing either breaks byte-determinism of outputs.
_PNG_COMPRESS_LEVEL = 6


class DecodeError(ValueError):
    """Raised when PNG bytes cannot be decoded."""


class UnsupportedFormatError(DecodeError):
    """Raised for well-formed PNGs outside the supported 8-bit family."""


def round_half_up(x: float) -> int:
    """Round to nearest integer, ties away from zero-point-five upward."""
    return math.floor(x + 0.5)


def _round_half_up_array(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5)


@dataclass(frozen=True)
class PointF:
    """A continuous pixel-space location; x grows right, y grows down."""

    x: float
    y: float


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box as (x, y, w, h) with x,y the top-left corner."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"bbox must have positive extent, got w={self.w}, h={self.h}")

    @property
    def center(self) -> PointF:
        return PointF(self.x + self.w / 2.0, self.y + self.h / 2.0)


@dataclass(frozen=True)
class Color:
    """An sRGB color with 8-bit channels."""

    r: int
    g: int
    b: int

    def __post_init__(self) -> None:
        for name in ("r", "g", "b"):
            v = getattr(self, name)
            if not isinstance(v, int) or not 0 <= v <= 255:
                raise ValueError(f"channel {name} must be an int in [0, 255], got {v!r}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.r, self.g, self.b)


class ImageBuffer:
    """Immutable 8-bit RGB raster; pixel (x, y) lives at array[y, x]."""

    __slots__ = ("_array",)

    def __init__(self, array: np.ndarray) -> None:
        arr = np.asarray(array)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected a (height, width, 3) array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if arr.dtype != np.uint8:
            raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
        arr = arr.copy()
        arr.flags.writeable = False
        self._array = arr

    @classmethod
    def from_flat(cls, width: int, height: int, pixels) -> "ImageBuffer":
        """Build a buffer from a flat row-major sequence of RGB bytes."""
        flat = np.frombuffer(bytes(pixels), dtype=np.uint8) if isinstance(pixels, (bytes, bytearray)) else np.asarray(pixels, dtype=np.uint8).ravel()
        if flat.size != width * height * 3:
            raise ValueError(f"expected {width * height * 3} bytes for {width}x{height} RGB, got {flat.size}")
        return cls(flat.reshape(height, width, 3))

    @property
    def array(self) -> np.ndarray:
        """The (height, width, 3) uint8 pixel array (read-only view)."""
        return self._array

    @property
    def width(self) -> int:
        return self._array.shape[1]

    @property
    def height(self) -> int:
        return self._array.shape[0]

    @property
    def pixels(self) -> bytes:
        """Flat row-major RGB bytes."""
        return self._array.tobytes()

    def content_digest(self) -> str:
        """SHA-256 over dimensions and raw pixels; stable across processes."""
        h = hashlib.sha256()
        h.update(f"{self.width}x{self.height}:".encode("ascii"))
        h.update(self.pixels)
        return h.hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self._array.shape == other._array.shape and bool(np.array_equal(self._array, other._array))

    __hash__ = None  # content-mutable siblings exist; identity hashing would mislead

    def __repr__(self) -> str:
        return f"ImageBuffer({self.width}x{self.height})"


def decode_png(data: bytes) -> ImageBuffer:
    """Decode PNG bytes to an RGB buffer.

    Grayscale and palette images are expanded to RGB; alpha is dropped.
    16-bit channel depth raises UnsupportedFormatError, malformed bytes
    raise DecodeError.
    """
    if len(data) < 8 or data[:8] != _PNG_SIGNATURE:
        raise DecodeError("not a PNG: bad signature at offset 0")
    if len(data) < 29 or data[12:16] != b"IHDR":
        raise DecodeError("malformed PNG: IHDR chunk not found at offset 12")
    bit_depth = data[24]
    if bit_depth == 16:
        raise UnsupportedFormatError("16-bit channel depth is not supported; re-encode as 8-bit")
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise DecodeError(f"malformed PNG: {exc}") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"malformed PNG: {exc}") from exc
    return ImageBuffer(arr)


def encode_png(image: ImageBuffer) -> bytes:
    """Encode to PNG bytes; deterministic for identical pixel content."""
    im = Image.fromarray(image.array, mode="RGB")
    out = io.BytesIO()
    im.save(out, format="PNG", optimize=False, compress_level=_PNG_COMPRESS_LEVEL)
    return out.getvalue()


def to_grayscale(image: ImageBuffer) -> ImageBuffer:
    """BT.601 luma, rounded half-up, replicated across the three channels."""
    luma = image.array.astype(np.float64) @ _LUMA_WEIGHTS
    gray = _round_half_up_array(luma).astype(np.uint8)
    return ImageBuffer(np.repeat(gray[:, :, np.newaxis], 3, axis=2))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps over [-ceil(3*sigma), ceil(3*sigma)]."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return weights / weights.sum()


def gaussian_blur(image: ImageBuffer, sigma: float) -> ImageBuffer:
    """Separable Gaussian blur with clamp-to-edge borders.

    Both passes run in float64; the final values are rounded half-up back
    to uint8. Pure function of (pixels, sigma).
    """
    from scipy.ndimage import convolve1d

    kernel = gaussian_kernel(sigma)
    work = image.array.astype(np.float64)
    work = convolve1d(work, kernel, axis=1, mode="nearest")
    work = convolve1d(work, kernel, axis=0, mode="nearest")
    out = np.clip(_round_half_up_array(work), 0, 255).astype(np.uint8)
    return ImageBuffer(out)


def crop(image: ImageBuffer, bbox: BBox) -> ImageBuffer:
    """Extract the sub-image covered by bbox, intersected with the bounds.

    The origin is floored, extents are rounded half-up, and the resulting
    integer window is clamped to the image; an empty intersection raises
    ValueError.
    """
    x0 = math.floor(bbox.x)
    y0 = math.floor(bbox.y)
    x1 = x0 + round_half_up(bbox.w)
    y1 = y0 + round_half_up(bbox.h)
    cx0, cy0 = max(x0, 0), max(y0, 0)
    cx1, cy1 = min(x1, image.width), min(y1, image.height)
    if cx1 <= cx0 or cy1 <= cy0:
        raise ValueError(
            f"crop region ({bbox.x}, {bbox.y}, {bbox.w}, {bbox.h}) does not intersect a "
            f"{image.width}x{image.height} image"
        )
    return ImageBuffer(image.array[cy0:cy1, cx0:cx1])
