"""Training losses: cross-entropy, smooth-L1, -log IoU, cosine, and the
weighted multi-task combination.

All losses return scalar Tensors and average over the rows they are given;
any count scaling is folded into the learning rate. The IoU loss is built
from autodiff primitives, so its gradient is the chain rule through the
min/product structure; gradient checks hold it to finite differences away
from min ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import DistBox


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0


def softmax_ce(logits: Tensor, class_index) -> Tensor:
    """Mean -log softmax(logits)[class] over rows; fused stable form."""
    if logits.data.ndim != 2:
        raise ad.ShapeError(f"softmax_ce: expected [n, classes], got {logits.data.shape}")
    n = logits.data.shape[0]
    labels = np.asarray(class_index, dtype=np.int64)
    if labels.ndim == 0:
        labels = np.full(n, int(labels), dtype=np.int64)
    if labels.shape != (n,):
        raise ad.ShapeError(f"softmax_ce: {labels.shape} labels for {n} rows")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(-(z[rows, labels] - np.log(e.sum(axis=1))).mean())

    def bwd(g):
        dz = p.copy()
        dz[rows, labels] -= 1.0
        return (dz * (g / n),)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), bwd)


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Huber elements (0.5 d^2 for |d|<1, |d|-0.5 beyond) summed per row,
    averaged over rows."""
    d = ad.sub(pred, target)
    a = ad.abs_(d)
    near = Tensor((a.data < 1.0).astype(pred.dtype))  # constant switch mask
    far = Tensor((a.data >= 1.0).astype(pred.dtype))
    quad = ad.scale(ad.mul(d, d), 0.5)
    lin = ad.add_const(a, -0.5)
    per_elem = ad.add(ad.mul(near, quad), ad.mul(far, lin))
    if per_elem.data.ndim == 1:
        return ad.reduce_mean(per_elem)
    return ad.reduce_mean(ad.reduce_sum(per_elem, axis=1))


def _col(t: Tensor, j: int) -> Tensor:
    return t[:, j]


def iou_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean -ln(IoU) between DistBox rows [n,4] ordered (xt, xb, xl, xr).

    Both boxes share the same reference point, so the intersection is
    (min of vertical extents) * (min of horizontal extents) and is always
    positive when all eight distances are.
    """
    if pred.data.shape != gt.data.shape or pred.data.ndim != 2 or pred.data.shape[1] != 4:
        raise ad.ShapeError(f"iou_loss: expected matching [n,4], got {pred.data.shape} vs {gt.data.shape}")
    if np.any(pred.data <= 0) or np.any(gt.data <= 0):
        raise ValueError("iou_loss: all side distances must be positive")
    pt, pb, pl, pr = (_col(pred, j) for j in range(4))
    tt, tb, tl, tr = (_col(gt, j) for j in range(4))
    area_p = ad.mul(ad.add(pt, pb), ad.add(pl, pr))
    area_t = ad.mul(ad.add(tt, tb), ad.add(tl, tr))
    ih = ad.add(ad.minimum(pt, tt), ad.minimum(pb, tb))
    iw = ad.add(ad.minimum(pl, tl), ad.minimum(pr, tr))
    inter = ad.mul(ih, iw)
    union = ad.sub(ad.add(area_p, area_t), inter)
    per_loc = ad.sub(ad.log(union), ad.log(inter))
    return ad.reduce_mean(per_loc)


def iou_loss_single(pred: DistBox, gt: DistBox):
    """Scalar convenience wrapper: returns (loss, d loss / d pred[4])."""
    p = Tensor(np.array([[pred.xt, pred.xb, pred.xl, pred.xr]], dtype=np.float64),
               requires_grad=True)
    t = Tensor(np.array([[gt.xt, gt.xb, gt.xl, gt.xr]], dtype=np.float64))
    loss = iou_loss(p, t)
    ad.backward(loss)
    return float(loss.data), p.grad[0].copy()


def cosine_loss(theta_pred: Tensor, theta_gt: Tensor) -> Tensor:
    """Mean of 1 - cos(pred - gt); 2*pi-periodic in both arguments."""
    diff = ad.sub(theta_pred, theta_gt)
    return ad.reduce_mean(ad.add_const(ad.neg(ad.cos(diff)), 1.0))


def total_loss(cls: Tensor, loc: Tensor, ori: Tensor, w: LossWeights = LossWeights()) -> Tensor:
    return ad.add(cls, ad.add(ad.scale(loc, w.lambda1), ad.scale(ori, w.lambda2)))
