"""Region-of-interest masking on stride-8 feature maps.

A proposal box is mapped to continuous feature coordinates (no rounding)
and turned into a per-cell multiplier map: +1 inside the box, -1 in an
expanded surrounding band (ternary mode), 0 elsewhere. Applying the mask
is a plain elementwise multiply, so the feature map keeps its resolution
and aspect ratio.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T

MASK_MODES = ("binary", "expanded_binary", "ternary")
DEFAULT_ALPHA = 1.0 / 3.0


@dataclass(frozen=True)
class BoxXYXY:
    """Axis-aligned box in continuous coordinates, corners (x0, y0)-(x1, y1)."""
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self):
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def area(self) -> float:
        return self.width * self.height

    def scaled(self, factor: float) -> "BoxXYXY":
        return BoxXYXY(self.x0 * factor, self.y0 * factor,
                       self.x1 * factor, self.y1 * factor)


@dataclass(frozen=True)
class MaskConfig:
    mode: str = "ternary"
    alpha: float = DEFAULT_ALPHA
    stride: int = 8

    def __post_init__(self):
        if self.mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {self.mode!r}; expected one of {MASK_MODES}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")


@dataclass
class RoiMask:
    """Per-cell multiplier map with entries in {+1, -1, 0}."""
    values: np.ndarray          # (feat_h, feat_w) float64
    inner_box: BoxXYXY          # feature coordinates
    outer_box: BoxXYXY          # feature coordinates, clipped to the extent
    mode: str
    alpha: float
    empty_interior: bool = False

    @property
    def support(self) -> np.ndarray:
        """Boolean map of cells with nonzero mask value."""
        return self.values != 0.0

    @property
    def band(self) -> np.ndarray:
        return self.values == -1.0


def make_mask(box: BoxXYXY, config: MaskConfig, feat_h: int, feat_w: int) -> RoiMask:
    """Build a mask for one box on a (feat_h, feat_w) grid.

    The box is divided by the stride without rounding; a cell (i, j)
    belongs to a region iff its center (j + 0.5, i + 0.5) lies inside the
    region's continuous box. The outer box is (w + 2*alpha*w, h + 2*alpha*h)
    centered with the inner box, clipped to the feature extent.
    """
    fb = box.scaled(1.0 / config.stride)
    a = config.alpha
    ox0 = fb.x0 - a * fb.width
    ox1 = fb.x1 + a * fb.width
    oy0 = fb.y0 - a * fb.height
    oy1 = fb.y1 + a * fb.height
    outer = BoxXYXY(max(0.0, min(ox0, feat_w - 1e-9)), max(0.0, min(oy0, feat_h - 1e-9)),
                    min(float(feat_w), max(ox1, 1e-9)), min(float(feat_h), max(oy1, 1e-9)))

    cx = np.arange(feat_w) + 0.5
    cy = np.arange(feat_h) + 0.5
    in_x = (cx >= fb.x0) & (cx < fb.x1)
    in_y = (cy >= fb.y0) & (cy < fb.y1)
    inner = in_y[:, None] & in_x[None, :]
    out_x = (cx >= outer.x0) & (cx < outer.x1)
    out_y = (cy >= outer.y0) & (cy < outer.y1)
    within_outer = out_y[:, None] & out_x[None, :]

    values = np.zeros((feat_h, feat_w))
    if config.mode == "binary":
        values[inner] = 1.0
    elif config.mode == "expanded_binary":
        values[within_outer | inner] = 1.0
    else:  # ternary
        values[within_outer] = -1.0
        values[inner] = 1.0

    return RoiMask(values=values, inner_box=fb, outer_box=outer,
                   mode=config.mode, alpha=a,
                   empty_interior=not inner.any())


def apply_mask(features: T.Tensor, mask: RoiMask) -> T.Tensor:
    """Multiply a (n, c, h, w) feature tensor by the mask, broadcast over
    channels; differentiable (backward multiplies by the same mask)."""
    n, c, h, w = features.shape
    if mask.values.shape != (h, w):
        raise T.ShapeError(
            f"apply_mask: mask {mask.values.shape} vs features spatial ({h}, {w})")
    return T.mul_const(features, mask.values[None, None, :, :])


def mask_to_pgm(mask: RoiMask, path) -> None:
    """Export as binary PGM with -1/0/+1 mapped to 0/128/255."""
    levels = np.full(mask.values.shape, 128, dtype=np.uint8)
    levels[mask.values == 1.0] = 255
    levels[mask.values == -1.0] = 0
    h, w = levels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(levels.tobytes())


def mask_to_csv(mask: RoiMask, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for row in mask.values:
            writer.writerow(int(v) for v in row)
