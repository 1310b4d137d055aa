"""Image values and single-pixel perturbations.

Coordinates follow raster convention: ``x`` is the column, ``y`` the row and
the origin is the top-left pixel.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import png


class BoundsError(IndexError):
    """A perturbation addresses a pixel outside the image."""


class RgbImage:
    """Immutable 8-bit RGB raster backed by a read-only ``(h, w, 3)`` array."""

    __slots__ = ("_pixels",)

    def __init__(self, pixels):
        arr = np.asarray(pixels)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected an (h, w, 3) array, got shape {arr.shape}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError("image must have at least one pixel")
        if arr.dtype != np.uint8:
            if np.any(arr < 0) or np.any(arr > 255) or np.any(arr != np.round(arr)):
                raise ValueError("channel values must be integers in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = np.array(arr, dtype=np.uint8, copy=True)
        arr.flags.writeable = False
        self._pixels = arr

    @classmethod
    def from_rows(cls, width: int, height: int, triples) -> "RgbImage":
        """Build from a row-major sequence of ``(r, g, b)`` triples."""
        arr = np.asarray(list(triples), dtype=np.int64)
        if arr.shape != (width * height, 3):
            raise ValueError("pixel count must equal width * height")
        return cls(arr.reshape(height, width, 3))

    @property
    def pixels(self) -> np.ndarray:
        return self._pixels

    @property
    def width(self) -> int:
        return self._pixels.shape[1]

    @property
    def height(self) -> int:
        return self._pixels.shape[0]

    def __getitem__(self, xy: tuple[int, int]) -> tuple[int, int, int]:
        x, y = xy
        r, g, b = self._pixels[y, x]
        return int(r), int(g), int(b)

    def __eq__(self, other):
        if not isinstance(other, RgbImage):
            return NotImplemented
        return self._pixels.shape == other._pixels.shape and bool(
            np.array_equal(self._pixels, other._pixels)
        )

    def __hash__(self):
        return hash((self._pixels.shape, self._pixels.tobytes()))

    def __repr__(self):
        return f"RgbImage(width={self.width}, height={self.height})"

    def diff_count(self, other: "RgbImage") -> int:
        """Number of pixel positions whose colour differs."""
        if self._pixels.shape != other._pixels.shape:
            raise ValueError("images have different dimensions")
        return int(np.any(self._pixels != other._pixels, axis=2).sum())


@dataclass(frozen=True)
class PixelPerturbation:
    x: int
    y: int
    r: int
    g: int
    b: int

    def __post_init__(self):
        for name in ("x", "y", "r", "g", "b"):
            value = getattr(self, name)
            if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, np.integer)):
                raise TypeError(f"{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        for name in ("r", "g", "b"):
            if not 0 <= getattr(self, name) <= 255:
                raise ValueError(f"{name} must be in [0, 255]")

    @property
    def color(self) -> tuple[int, int, int]:
        return (self.r, self.g, self.b)

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.x, self.y, self.r, self.g, self.b)

    @classmethod
    def from_vector(cls, vector) -> "PixelPerturbation":
        x, y, r, g, b = (int(v) for v in vector)
        return cls(x, y, r, g, b)


def decode_png(data: bytes) -> RgbImage:
    return RgbImage(png.decode_rgb(data))


def encode_png(image: RgbImage, level: int = png.ZLIB_LEVEL) -> bytes:
    return png.encode_rgb(image.pixels, level)


def read_png(path) -> RgbImage:
    return decode_png(Path(path).read_bytes())


def write_png(image: RgbImage, path) -> None:
    Path(path).write_bytes(encode_png(image))


def apply_perturbation(image: RgbImage, p: PixelPerturbation) -> RgbImage:
    """Return a copy of ``image`` with pixel ``(p.x, p.y)`` set to ``p.color``."""
    if not (0 <= p.x < image.width and 0 <= p.y < image.height):
        raise BoundsError(
            f"pixel ({p.x}, {p.y}) outside {image.width}x{image.height} image"
        )
    arr = image.pixels.copy()
    arr[p.y, p.x] = (p.r, p.g, p.b)
    out = RgbImage.__new__(RgbImage)
    arr.flags.writeable = False
    out._pixels = arr
    return out
