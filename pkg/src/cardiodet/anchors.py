"""Circular anchor grid, label assignment, target encoding and sampling.

Anchors live at feature-map cell centers projected onto the input image,
one circle per radius per cell, flat-indexed as (row, col, radius) with
the radius index fastest. Labels use the 0.7 / 0.5 IoU thresholds with the
band in between ignored; a visible frame is guaranteed at least one
positive by force-labeling the max-IoU anchor when nothing clears 0.7.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Circle, circle_iou_many
from .phantom import VIEW_TO_CLASS, HeartAnnotation

DESK_RADII = (10.0, 15.0, 20.0, 30.0)
PAPER_RADII = (80.0, 120.0, 160.0, 240.0)

LABEL_NEGATIVE = 0
LABEL_IGNORE = -1

IOU_POSITIVE = 0.7
IOU_NEGATIVE = 0.5


@dataclass(frozen=True)
class AnchorGrid:
    stride: int
    radii: tuple
    h: int
    w: int
    cx: np.ndarray  # [h*w*A] anchor centers and radii, radius index fastest
    cy: np.ndarray
    r: np.ndarray

    @property
    def n_anchors(self):
        return self.cx.size

    @property
    def anchors_per_cell(self):
        return len(self.radii)

    def circle(self, flat_index: int) -> Circle:
        return Circle(float(self.cx[flat_index]), float(self.cy[flat_index]),
                      float(self.r[flat_index]))


def make_anchor_grid(map_h: int, map_w: int, stride: int = 8,
                     radii=DESK_RADII) -> AnchorGrid:
    a = len(radii)
    ys = (np.arange(map_h) + 0.5) * stride
    xs = (np.arange(map_w) + 0.5) * stride
    cy = np.repeat(np.repeat(ys, map_w), a)
    cx = np.repeat(np.tile(xs, map_h), a)
    r = np.tile(np.asarray(radii, dtype=np.float64), map_h * map_w)
    return AnchorGrid(stride=stride, radii=tuple(float(x) for x in radii),
                      h=map_h, w=map_w, cx=cx, cy=cy, r=r)


@dataclass
class AnchorTargets:
    """Struct-of-arrays over all anchors of one frame.

    labels: view class for positives (1..3), 0 negative, -1 ignore.
    Regression fields are zero everywhere except positive anchors.
    """
    labels: np.ndarray  # int8 [n]
    tx: np.ndarray
    ty: np.ndarray
    tr: np.ndarray
    theta: np.ndarray
    iou: np.ndarray

    def __len__(self):
        return self.labels.size

    @property
    def positive_indices(self):
        return np.flatnonzero(self.labels > 0)


def encode_targets(anchor: Circle, gt: Circle):
    """Relative offsets (tx, ty) in anchor radii and log radius ratio."""
    tx = (gt.cx - anchor.cx) / anchor.r
    ty = (gt.cy - anchor.cy) / anchor.r
    tr = math.log(gt.r / anchor.r)
    return tx, ty, tr


def decode(anchor: Circle, tx: float, ty: float, tr: float) -> Circle:
    return Circle(anchor.cx + tx * anchor.r, anchor.cy + ty * anchor.r,
                  anchor.r * math.exp(tr))


def assign_labels(grid: AnchorGrid, gt: HeartAnnotation) -> AnchorTargets:
    n = grid.n_anchors
    labels = np.zeros(n, dtype=np.int8)
    tx = np.zeros(n, dtype=np.float64)
    ty = np.zeros(n, dtype=np.float64)
    tr = np.zeros(n, dtype=np.float64)
    th = np.zeros(n, dtype=np.float64)
    iou = np.zeros(n, dtype=np.float64)
    if not gt.visible:
        return AnchorTargets(labels, tx, ty, tr, th, iou)

    gtc = Circle(gt.cx, gt.cy, gt.r)
    iou = circle_iou_many(grid.cx, grid.cy, grid.r, gtc)
    cls = VIEW_TO_CLASS[gt.view]
    pos = iou > IOU_POSITIVE
    if not pos.any():
        pos[int(np.argmax(iou))] = True  # max-IoU fallback, first max wins
    labels[pos] = cls
    labels[(~pos) & (iou >= IOU_NEGATIVE)] = LABEL_IGNORE

    idx = np.flatnonzero(pos)
    tx[idx] = (gt.cx - grid.cx[idx]) / grid.r[idx]
    ty[idx] = (gt.cy - grid.cy[idx]) / grid.r[idx]
    tr[idx] = np.log(gt.r / grid.r[idx])
    th[idx] = gt.theta
    return AnchorTargets(labels, tx, ty, tr, th, iou)


def sample_minibatch(targets: AnchorTargets, rng_seed, n_sample: int = 256,
                     positive_cap: int = 64) -> np.ndarray:
    """Pick anchors for one image's loss: all positives (capped), the rest
    uniform negatives without replacement; ignores are never selected."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) \
        else np.random.default_rng(rng_seed)
    pos = np.flatnonzero(targets.labels > 0)
    neg = np.flatnonzero(targets.labels == LABEL_NEGATIVE)
    if pos.size > positive_cap:
        pos = np.sort(rng.choice(pos, size=positive_cap, replace=False))
    n_neg = min(neg.size, n_sample - pos.size)
    if n_neg > 0:
        neg = np.sort(rng.choice(neg, size=n_neg, replace=False))
    else:
        neg = neg[:0]
    return np.concatenate([pos, neg])
