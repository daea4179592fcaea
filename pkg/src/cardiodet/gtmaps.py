"""Dense ground-truth maps for the IoU-loss head, and prediction decoding.

Per frame there are 9 maps on the feature grid: 4 one-hot class channels
(background + three views), 4 side distances of the heart's bounding
square in input-image pixels, and one orientation map. A location is
positive when its projected image point falls in the central square of
side 0.7 x diameter; locations outside the bounding square are negative;
the ring in between is masked out of the loss via valid_mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .geometry import DistBox, distbox_to_aabox
from .phantom import CLASS_TO_VIEW, VIEW_TO_CLASS, HeartAnnotation

CENTRAL_FRACTION = 0.7


@dataclass
class GtMaps:
    cls: np.ndarray        # [4,h,w] one-hot
    loc: np.ndarray        # [4,h,w] (xt, xb, xl, xr) in image pixels
    ori: np.ndarray        # [1,h,w] radians
    pos_mask: np.ndarray   # [1,h,w] in {0,1}
    valid_mask: np.ndarray  # [1,h,w] in {0,1}


@dataclass(frozen=True)
class FramePrediction:
    """Decoded per-frame output; geometry fields meaningful only when visible."""
    visible: bool
    view: Optional[str]
    cx: float = 0.0
    cy: float = 0.0
    r: float = 0.0
    theta: float = 0.0
    score: float = 0.0
    source: Tuple[int, int] = (0, 0)   # feature-map location the output came from
    anchor: Optional[int] = None       # radius index, anchor-head variant only


def grid_points(map_h: int, map_w: int, stride: int):
    """Image-plane coordinates of feature-map cell centers."""
    px = (np.arange(map_w) + 0.5) * stride
    py = (np.arange(map_h) + 0.5) * stride
    return np.meshgrid(px, py)  # each [h,w]


def build_gt_maps(gt: HeartAnnotation, map_h: int, map_w: int, stride: int) -> GtMaps:
    cls = np.zeros((4, map_h, map_w), dtype=np.float32)
    loc = np.zeros((4, map_h, map_w), dtype=np.float32)
    ori = np.zeros((1, map_h, map_w), dtype=np.float32)
    pos = np.zeros((1, map_h, map_w), dtype=np.float32)
    valid = np.ones((1, map_h, map_w), dtype=np.float32)
    if not gt.visible:
        cls[0] = 1.0
        return GtMaps(cls, loc, ori, pos, valid)

    px, py = grid_points(map_h, map_w, stride)
    half_central = CENTRAL_FRACTION * gt.r
    in_central = (np.abs(px - gt.cx) <= half_central) & (np.abs(py - gt.cy) <= half_central)
    in_square = (np.abs(px - gt.cx) <= gt.r) & (np.abs(py - gt.cy) <= gt.r)

    if not in_central.any():
        # heart smaller than the grid resolves: force the nearest location
        j = int(np.clip(round(gt.cx / stride - 0.5), 0, map_w - 1))
        i = int(np.clip(round(gt.cy / stride - 0.5), 0, map_h - 1))
        in_central = np.zeros_like(in_central)
        in_central[i, j] = True
        in_square = in_square | in_central

    k = VIEW_TO_CLASS[gt.view]
    valid[0] = np.where(in_square & ~in_central, 0.0, 1.0)
    pos[0] = in_central.astype(np.float32)
    cls[0] = (~in_central).astype(np.float32)  # ring rows are masked out anyway
    cls[k] = in_central.astype(np.float32)

    x0, x1 = gt.cx - gt.r, gt.cx + gt.r
    y0, y1 = gt.cy - gt.r, gt.cy + gt.r
    m = in_central
    # forced positives can sit outside the bounding square; keep sides positive
    loc[0][m] = np.maximum(py[m] - y0, 0.5)
    loc[1][m] = np.maximum(y1 - py[m], 0.5)
    loc[2][m] = np.maximum(px[m] - x0, 0.5)
    loc[3][m] = np.maximum(x1 - px[m], 0.5)
    ori[0][m] = gt.theta
    return GtMaps(cls, loc, ori, pos, valid)


def select_prediction(cls_probs: np.ndarray, loc: np.ndarray, ori: np.ndarray,
                      stride: int, tau: float = 0.5) -> FramePrediction:
    """Decode the location with the highest non-background class probability.

    cls_probs: [4,h,w] softmax scores, loc: [4,h,w] side distances,
    ori: [1,h,w]. The heart is declared absent when the best score is
    below tau. Ties resolve in row-major order via argmax.
    """
    fg = cls_probs[1:4]
    best_per_loc = fg.max(axis=0)
    flat = int(np.argmax(best_per_loc))
    h, w = best_per_loc.shape
    i, j = divmod(flat, w)
    score = float(best_per_loc[i, j])
    if score < tau:
        return FramePrediction(False, None, score=score, source=(i, j))
    view = CLASS_TO_VIEW[int(np.argmax(fg[:, i, j])) + 1]
    px, py = (j + 0.5) * stride, (i + 0.5) * stride
    box = distbox_to_aabox(
        DistBox(float(loc[0, i, j]), float(loc[1, i, j]),
                float(loc[2, i, j]), float(loc[3, i, j])), px, py)
    width, height = box.x1 - box.x0, box.y1 - box.y0
    return FramePrediction(
        True, view,
        cx=float((box.x0 + box.x1) / 2), cy=float((box.y0 + box.y1) / 2),
        r=float((width + height) / 4), theta=float(ori[0, i, j]),
        score=score, source=(i, j))
