"""Circle and box parameterizations and exact IoU computations.

Two localization encodings are used throughout: a circle (center + radius)
and a DistBox (distances from an interior reference point to the four sides
of an axis-aligned box). Circle-circle IoU uses the exact two-segment lens
formula so tests can hold it to rasterization within tight tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError(f"Circle: radius must be positive, got {self.r}")


@dataclass(frozen=True)
class DistBox:
    """Distances from a reference point to the top/bottom/left/right sides."""
    xt: float
    xb: float
    xl: float
    xr: float

    def __post_init__(self):
        if min(self.xt, self.xb, self.xl, self.xr) < 0:
            raise ValueError(f"DistBox: negative side distance in {self}")


@dataclass(frozen=True)
class AABox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"AABox: degenerate box {self}")

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)


def circle_iou(a: Circle, b: Circle) -> float:
    """Exact intersection-over-union of two circles.

    Disjoint and contained configurations are handled in closed form so no
    acos ever sees an argument outside [-1, 1].
    """
    d = math.hypot(b.cx - a.cx, b.cy - a.cy)
    r1, r2 = a.r, b.r
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        lo, hi = min(r1, r2), max(r1, r2)
        return (lo * lo) / (hi * hi)
    # two-segment lens: split the chord at distance d1 from center a
    d1 = (d * d + r1 * r1 - r2 * r2) / (2.0 * d)
    d2 = d - d1
    inter = (r1 * r1 * math.acos(min(1.0, max(-1.0, d1 / r1)))
             - d1 * math.sqrt(max(0.0, r1 * r1 - d1 * d1))
             + r2 * r2 * math.acos(min(1.0, max(-1.0, d2 / r2)))
             - d2 * math.sqrt(max(0.0, r2 * r2 - d2 * d2)))
    union = math.pi * r1 * r1 + math.pi * r2 * r2 - inter
    return inter / union


def circle_iou_many(cxs, cys, rs, c: Circle):
    """circle_iou of many circles (parallel arrays) against one circle.

    Same closed forms as circle_iou, vectorized with masked branches.
    """
    import numpy as np

    cxs = np.asarray(cxs, dtype=np.float64)
    cys = np.asarray(cys, dtype=np.float64)
    r1 = np.asarray(rs, dtype=np.float64)
    d = np.hypot(c.cx - cxs, c.cy - cys)
    r2 = c.r
    out = np.zeros_like(d)

    contained = d <= np.abs(r1 - r2)
    if contained.any():
        lo = np.minimum(r1, r2)
        hi = np.maximum(r1, r2)
        out[contained] = (lo[contained] ** 2) / (hi[contained] ** 2)

    lens = (~contained) & (d < r1 + r2)
    if lens.any():
        dl, r1l = d[lens], r1[lens]
        d1 = (dl * dl + r1l * r1l - r2 * r2) / (2.0 * dl)
        d2 = dl - d1
        inter = (r1l * r1l * np.arccos(np.clip(d1 / r1l, -1.0, 1.0))
                 - d1 * np.sqrt(np.maximum(0.0, r1l * r1l - d1 * d1))
                 + r2 * r2 * np.arccos(np.clip(d2 / r2, -1.0, 1.0))
                 - d2 * np.sqrt(np.maximum(0.0, r2 * r2 - d2 * d2)))
        union = np.pi * r1l * r1l + np.pi * r2 * r2 - inter
        out[lens] = inter / union
    return out


def box_iou(a: AABox, b: AABox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def circle_to_box(c: Circle) -> AABox:
    """Tight axis-aligned (square) bounding box of a circle."""
    return AABox(c.cx - c.r, c.cy - c.r, c.cx + c.r, c.cy + c.r)


def circle_to_distbox(c: Circle, px: float, py: float) -> DistBox:
    """Side distances of the circle's bounding square seen from (px, py).

    The reference point must lie strictly inside the bounding square.
    """
    box = circle_to_box(c)
    xt = py - box.y0
    xb = box.y1 - py
    xl = px - box.x0
    xr = box.x1 - px
    if min(xt, xb, xl, xr) < 0:
        raise ValueError(
            f"reference point ({px}, {py}) lies outside the bounding square {box}")
    return DistBox(xt, xb, xl, xr)


def distbox_to_aabox(d: DistBox, px: float, py: float) -> AABox:
    return AABox(px - d.xl, py - d.xt, px + d.xr, py + d.xb)
