"""RGB8 raster images: decode, encode, luma."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from figmine.errors import FigmineError


class ImageDecodeError(FigmineError):
    pass


@dataclass(frozen=True, eq=False)
class RasterImage:
    """An immutable ``(height, width, 3)`` uint8 pixel array."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError(f"expected (h, w, 3) uint8 pixels, got {px.shape} {px.dtype}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        px = np.array(px, order="C", copy=True)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    def luma(self) -> np.ndarray:
        """Rec. 601 luma on the 0-255 scale as float64."""
        return self.pixels.astype(np.float64) @ np.array([0.299, 0.587, 0.114])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    def __hash__(self) -> int:
        return hash((self.pixels.shape, self.pixels.tobytes()))

    @classmethod
    def from_bytes(cls, data: bytes) -> RasterImage:
        try:
            with Image.open(io.BytesIO(data)) as im:
                rgb = im.convert("RGB")
                return cls(np.asarray(rgb, dtype=np.uint8))
        except (OSError, ValueError) as exc:
            raise ImageDecodeError(f"cannot decode image: {exc}") from exc

    @classmethod
    def open(cls, path: str | os.PathLike[str]) -> RasterImage:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def to_png_bytes(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.pixels).save(buf, format="PNG")
        return buf.getvalue()

    def save_png(self, path: str | os.PathLike[str]) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_png_bytes())
