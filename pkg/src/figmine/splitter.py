"""Split compound figures into panels by detecting uniform gutters.

A gutter is a run of rows (or columns) whose luma is flat and matches the
figure background. The figure is cut recursively, guillotine style, along every
gutter of the axis that has more of them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from figmine.errors import FigmineError
from figmine.raster import RasterImage

Axis = Literal["horizontal", "vertical"]


class OutOfBounds(FigmineError, ValueError):
    pass


@dataclass(frozen=True)
class SplitParams:
    uniformity_threshold: float = 4.0
    min_gutter: int = 6
    max_depth: int = 4
    min_panel: int = 224
    color_tolerance: float = 10.0

    def __post_init__(self) -> None:
        if min(self.uniformity_threshold, self.min_gutter, self.max_depth, self.min_panel, self.color_tolerance) <= 0:
            raise ValueError("split parameters must be positive")


@dataclass(frozen=True)
class SubfigureBox:
    x: int
    y: int
    w: int
    h: int
    depth: int = 0

    @property
    def area(self) -> int:
        return self.w * self.h

    def overlaps(self, other: SubfigureBox) -> bool:
        return (
            self.x < other.x + other.w
            and other.x < self.x + self.w
            and self.y < other.y + other.h
            and other.y < self.y + self.h
        )


def _background_level(luma: np.ndarray, threshold: float) -> float | None:
    """Reference gutter luma.

    A flat outer frame is a margin and gives the background directly. Without a
    margin, panels touch the frame and the background is read where flat lines
    meet it.
    """
    frame = np.concatenate([luma[0, :], luma[-1, :], luma[1:-1, 0], luma[1:-1, -1]])
    if frame.std() <= threshold:
        return float(frame.mean())
    flat_rows = luma.std(axis=1) <= threshold
    flat_cols = luma.std(axis=0) <= threshold
    ends = np.concatenate(
        [luma[flat_rows, 0], luma[flat_rows, -1], luma[0, flat_cols], luma[-1, flat_cols]]
    )
    if ends.size == 0:
        return None
    return float(np.median(ends))


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return [(int(s), int(e)) for s, e in zip(edges[::2], edges[1::2])]


def _gutters(luma: np.ndarray, axis: Axis, params: SplitParams) -> list[tuple[int, int]]:
    background = _background_level(luma, params.uniformity_threshold)
    if background is None:
        return []
    reduce_axis = 1 if axis == "horizontal" else 0
    std = luma.std(axis=reduce_axis)
    mean = luma.mean(axis=reduce_axis)
    mask = (std <= params.uniformity_threshold) & (np.abs(mean - background) <= params.color_tolerance)
    n = mask.size
    return [
        (s, e)
        for s, e in _runs(mask)
        if s > 0 and e < n and e - s >= params.min_gutter
    ]


def detect_gutters(image: RasterImage, axis: Axis, params: SplitParams = SplitParams()) -> list[tuple[int, int]]:
    """Half-open ``[start, end)`` intervals of interior gutters along ``axis``.

    ``horizontal`` gutters are bands of rows, ``vertical`` ones bands of columns.
    Runs touching the image edge are margins and are not reported.
    """
    if axis not in ("horizontal", "vertical"):
        raise ValueError(f"axis must be 'horizontal' or 'vertical', not {axis!r}")
    return _gutters(image.luma(), axis, params)


def _pieces(gutters: list[tuple[int, int]], n: int) -> list[tuple[int, int]]:
    bounds = [0] + [v for g in gutters for v in g] + [n]
    return [(bounds[i], bounds[i + 1]) for i in range(0, len(bounds), 2) if bounds[i + 1] > bounds[i]]


def split_compound(image: RasterImage, params: SplitParams = SplitParams()) -> list[SubfigureBox]:
    """Recursively cut ``image`` into panel boxes in reading order."""
    luma = image.luma()
    boxes: list[SubfigureBox] = []

    def visit(x0: int, y0: int, w: int, h: int, depth: int) -> None:
        if depth < params.max_depth:
            sub = luma[y0 : y0 + h, x0 : x0 + w]
            rows = _gutters(sub, "horizontal", params)
            cols = _gutters(sub, "vertical", params)
            if rows and len(rows) >= len(cols):
                for a, b in _pieces(rows, h):
                    visit(x0, y0 + a, w, b - a, depth + 1)
                return
            if cols:
                for a, b in _pieces(cols, w):
                    visit(x0 + a, y0, b - a, h, depth + 1)
                return
        boxes.append(SubfigureBox(x0, y0, w, h, depth))

    visit(0, 0, image.width, image.height, 0)
    return boxes


def filter_min_size(boxes: list[SubfigureBox], params: SplitParams = SplitParams()) -> list[SubfigureBox]:
    """Drop panels smaller than ``min_panel`` on either side."""
    return [b for b in boxes if b.w >= params.min_panel and b.h >= params.min_panel]


def crop(image: RasterImage, box: SubfigureBox) -> RasterImage:
    if box.w < 1 or box.h < 1 or box.x < 0 or box.y < 0 or box.x + box.w > image.width or box.y + box.h > image.height:
        raise OutOfBounds(f"{box} outside {image.width}x{image.height} image")
    return RasterImage(np.ascontiguousarray(image.pixels[box.y : box.y + box.h, box.x : box.x + box.w]))
