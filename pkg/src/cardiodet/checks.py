"""Central finite-difference gradient checking.

The numeric side never touches backward(): it re-runs the forward closure
at p+eps and p-eps and differences the loss values, so it is an independent
oracle for the analytic gradients.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def numeric_gradient(f, tensors, coords, eps=1e-5):
    """Central differences of scalar f() w.r.t. selected coordinates.

    tensors: list of Tensors whose .data f() reads.
    coords: list of (tensor_index, flat_index) pairs.
    Returns an array of d f / d coordinate estimates.
    """
    def value():
        v = f()
        return float(v.data) if hasattr(v, "data") else float(v)

    out = np.empty(len(coords), dtype=np.float64)
    for n, (ti, fi) in enumerate(coords):
        flat = tensors[ti].data.reshape(-1)
        keep = flat[fi]
        flat[fi] = keep + eps
        fp = value()
        flat[fi] = keep - eps
        fm = value()
        flat[fi] = keep
        out[n] = (fp - fm) / (2.0 * eps)
    return out


def relative_error(analytic, numeric):
    """|a - n| / max(1, |a|, |n|), elementwise; tolerant of zero gradients."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def check_gradients(f, tensors, rng=None, max_coords=64, eps=1e-5):
    """Compare backward() gradients of scalar f() against central differences.

    f is re-invoked for every probe, so it must be deterministic. Returns the
    max relative error over the probed coordinates.
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise ValueError("gradient checks require float64 tensors")
        t.grad = None
    loss = f()
    ad.backward(loss)
    analytic_full = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    coords = [(ti, fi) for ti, t in enumerate(tensors) for fi in range(t.data.size)]
    if rng is not None and len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    numeric = numeric_gradient(f, tensors, coords, eps=eps)
    analytic = np.array([analytic_full[ti].reshape(-1)[fi] for ti, fi in coords])
    return float(relative_error(analytic, numeric).max())


# ---------------------------------------------------------------------------
# ready-made suites for the gradcheck command and the acceptance tests


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return ad.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def check_primitives(seed: int = 0) -> dict:
    """Finite-difference every primitive at random (smooth) inputs.

    Inputs are drawn away from non-smooth loci: relu/abs away from 0,
    minimum away from ties, maxpool with distinct window entries.
    """
    rng = np.random.default_rng(seed)
    errs = {}

    def run(name, f, tensors):
        errs[name] = check_gradients(f, tensors, rng=rng, max_coords=48)

    a, b = _t(rng, 5, 4), _t(rng, 5, 4)
    run("add", lambda: ad.reduce_sum(ad.mul(ad.add(a, b), a)), [a, b])
    run("sub", lambda: ad.reduce_sum(ad.mul(ad.sub(a, b), b)), [a, b])
    run("mul", lambda: ad.reduce_sum(ad.mul(a, b)), [a, b])
    run("neg", lambda: ad.reduce_sum(ad.mul(ad.neg(a), b)), [a])
    run("scale", lambda: ad.reduce_sum(ad.scale(a, 2.5)), [a])
    run("add_const", lambda: ad.reduce_sum(ad.mul(ad.add_const(a, 1.5), a)), [a])

    m = ad.Tensor(rng.uniform(-1, 1, size=(6, 3)) + np.where(rng.random((6, 3)) < 0.5, -0.2, 0.2),
                  requires_grad=True)  # keep clear of the relu/abs kink
    run("relu", lambda: ad.reduce_sum(ad.mul(ad.relu(m), m)), [m])
    run("abs", lambda: ad.reduce_sum(ad.abs_(m)), [m])

    c = _t(rng, 4, 4)
    d = ad.Tensor(c.data + np.where(rng.random((4, 4)) < 0.5, -0.3, 0.3), requires_grad=True)
    run("minimum", lambda: ad.reduce_sum(ad.mul(ad.minimum(c, d), c)), [c, d])

    x = _t(rng, 5, 3, lo=-2.0, hi=2.0)
    run("sigmoid", lambda: ad.reduce_sum(ad.sigmoid(x)), [x])
    run("tanh", lambda: ad.reduce_sum(ad.mul(ad.tanh(x), x)), [x])
    run("cos", lambda: ad.reduce_sum(ad.cos(x)), [x])
    run("exp", lambda: ad.reduce_sum(ad.exp(x)), [x])
    run("softplus", lambda: ad.reduce_sum(ad.softplus(x)), [x])
    p = _t(rng, 5, 3, lo=0.5, hi=3.0)
    run("log", lambda: ad.reduce_sum(ad.log(p)), [p])

    g = _t(rng, 4, 6)
    run("reshape", lambda: ad.reduce_sum(ad.mul(ad.reshape(g, (6, 4)), ad.reshape(g, (6, 4)))), [g])
    run("permute", lambda: ad.reduce_sum(ad.mul(ad.permute(g, (1, 0)), ad.permute(g, (1, 0)))), [g])
    run("slice", lambda: ad.reduce_sum(ad.mul(g[1:3, 2:5], g[0:2, 0:3])), [g])
    idx = np.array([0, 2, 2, 3])
    run("take_rows", lambda: ad.reduce_sum(ad.mul(ad.take_rows(g, idx), ad.take_rows(g, idx))), [g])
    h2 = _t(rng, 2, 6)
    run("concat", lambda: ad.reduce_sum(ad.mul(ad.concat([g, h2], axis=0),
                                               ad.concat([g, h2], axis=0))), [g, h2])
    run("reduce_sum_axis", lambda: ad.reduce_sum(ad.mul(ad.reduce_sum(g, axis=1),
                                                        ad.reduce_sum(g, axis=1))), [g])
    run("reduce_mean", lambda: ad.reduce_mean(ad.mul(g, g)), [g])

    w1, w2 = _t(rng, 4, 5), _t(rng, 5, 3)
    run("matmul", lambda: ad.reduce_sum(ad.mul(ad.matmul(w1, w2), ad.matmul(w1, w2))), [w1, w2])
    bias = _t(rng, 3)
    xm = _t(rng, 6, 3)
    run("add_row", lambda: ad.reduce_sum(ad.mul(ad.add_row(xm, bias), xm)), [xm, bias])

    for stride in (1, 2):
        for pad in (0, 1):
            xi = _t(rng, 2, 3, 6, 6)
            wi = _t(rng, 4, 3, 3, 3)
            bi = _t(rng, 4)
            run(f"conv2d_s{stride}p{pad}",
                lambda xi=xi, wi=wi, bi=bi, s=stride, p=pad:
                    ad.reduce_sum(ad.mul(ad.conv2d(xi, wi, bi, s, p),
                                         ad.conv2d(xi, wi, bi, s, p))),
                [xi, wi, bi])

    # distinct values in every 2x2 window so the argmax is stable under eps
    base = np.arange(2 * 3 * 4 * 4, dtype=np.float64).reshape(2, 3, 4, 4)
    mp = ad.Tensor(base + rng.uniform(-0.2, 0.2, size=base.shape), requires_grad=True)
    run("maxpool2", lambda: ad.reduce_sum(ad.mul(ad.maxpool2(mp), ad.maxpool2(mp))), [mp])

    s = _t(rng, 5, 4)
    run("softmax_rows", lambda: ad.reduce_sum(ad.mul(ad.softmax_rows(s), s)), [s])
    return errs


def check_losses(seed: int = 0) -> dict:
    """Finite-difference the four training losses away from their kinks."""
    from . import losses

    rng = np.random.default_rng(seed)
    errs = {}

    logits = _t(rng, 8, 4, lo=-2.0, hi=2.0)
    labels = rng.integers(0, 4, size=8)
    errs["softmax_ce"] = check_gradients(
        lambda: losses.softmax_ce(logits, labels), [logits], rng=rng)

    pred = _t(rng, 6, 3, lo=-2.0, hi=2.0)
    # keep |pred - target| away from the smooth-L1 knee at 1
    target = ad.Tensor(pred.data + np.where(rng.random((6, 3)) < 0.5, -0.5, 1.6))
    errs["smooth_l1"] = check_gradients(
        lambda: losses.smooth_l1(pred, target), [pred], rng=rng)

    dp = ad.Tensor(rng.uniform(5.0, 30.0, size=(10, 4)), requires_grad=True)
    dt = ad.Tensor(dp.data + np.where(rng.random((10, 4)) < 0.5, -2.0, 2.0))
    errs["iou_loss"] = check_gradients(
        lambda: losses.iou_loss(dp, dt), [dp], rng=rng)

    th = _t(rng, 12, lo=0.0, hi=2 * np.pi)
    tg = ad.Tensor(rng.uniform(0.0, 2 * np.pi, size=12))
    errs["cosine_loss"] = check_gradients(
        lambda: losses.cosine_loss(th, tg), [th], rng=rng)

    c1 = _t(rng, 5, 4, lo=-1, hi=1)
    r1 = _t(rng, 3, 2, lo=-1, hi=1)
    o1 = _t(rng, 3, lo=0, hi=6)
    lab1 = rng.integers(0, 4, size=5)
    rt1 = ad.Tensor(r1.data + 0.4)
    ot1 = ad.Tensor(o1.data + 0.9)
    w = losses.LossWeights(0.7, 1.3)
    errs["total_loss"] = check_gradients(
        lambda: losses.total_loss(losses.softmax_ce(c1, lab1),
                                  losses.smooth_l1(r1, rt1),
                                  losses.cosine_loss(o1, ot1), w),
        [c1, r1, o1], rng=rng)
    return errs


def check_end_to_end(seed: int = 0, max_coords: int = 64) -> dict:
    """Whole-model gradient check on a tiny 64-bit configuration.

    24x24 frames, 4-channel backbone, window dim 8, LSTM hidden 4, clip of
    3 frames; the loss is the full multi-task training loss with a frozen
    anchor sample / gt-map supervision.
    """
    from .anchors import assign_labels, make_anchor_grid, sample_minibatch
    from .gtmaps import build_gt_maps
    from . import losses
    from .network import Model, ModelConfig
    from .phantom import HeartAnnotation

    rng = np.random.default_rng(seed)
    frames = rng.uniform(0.0, 1.0, size=(3, 1, 24, 24))
    gts = [HeartAnnotation(True, "4C", 12.0 + t, 11.0, 6.0, 1.1 + 0.3 * t) for t in range(3)]
    errs = {}

    for variant in ("temporal-anchor", "iou"):
        cfg = ModelConfig.for_variant(
            variant, conv_plan=((4, 4), (4, 4), (4, 4)), window_dim=8,
            lstm_hidden=4, radii=(4.0, 6.0, 9.0), dtype="float64")
        model = Model(cfg, seed=seed)
        h = w = 24 // cfg.stride
        hw = h * w

        if cfg.head == "anchor":
            grid = make_anchor_grid(h, w, cfg.stride, cfg.radii)
            rows, labels, pos_rows, regs, ths = [], [], [], [], []
            for t, gt in enumerate(gts):
                tg = assign_labels(grid, gt)
                sel = sample_minibatch(tg, np.random.default_rng(seed + t), 16, 8)
                rows.append(sel + t * grid.n_anchors)
                labels.append(np.maximum(tg.labels[sel], 0))
                pos = tg.positive_indices
                pos_rows.append(pos + t * grid.n_anchors)
                regs.append(np.stack([tg.tx[pos], tg.ty[pos], tg.tr[pos]], axis=1))
                ths.append(tg.theta[pos])
            rows = np.concatenate(rows)
            labels = np.concatenate(labels)
            pos_rows = np.concatenate(pos_rows)
            reg_t = ad.Tensor(np.concatenate(regs))
            th_t = ad.Tensor(np.concatenate(ths))

            def f():
                out = model.forward(frames)
                cls = losses.softmax_ce(ad.take_rows(out.cls, rows), labels)
                loc = losses.smooth_l1(ad.take_rows(out.reg, pos_rows), reg_t)
                ori = losses.cosine_loss(ad.take_rows(out.theta, pos_rows), th_t)
                return losses.total_loss(cls, loc, ori)
        else:
            rows, labels, pos_rows, locs, ths = [], [], [], [], []
            for t, gt in enumerate(gts):
                maps = build_gt_maps(gt, h, w, cfg.stride)
                valid = np.flatnonzero(maps.valid_mask.reshape(-1) > 0)
                rows.append(valid + t * hw)
                labels.append(np.argmax(maps.cls, axis=0).reshape(-1)[valid])
                pos = np.flatnonzero(maps.pos_mask.reshape(-1) > 0)
                pos_rows.append(pos + t * hw)
                locs.append(maps.loc.reshape(4, -1).T[pos])
                ths.append(maps.ori.reshape(-1)[pos])
            rows = np.concatenate(rows)
            labels = np.concatenate(labels)
            pos_rows = np.concatenate(pos_rows)
            loc_t = ad.Tensor(np.concatenate(locs).astype(np.float64))
            th_t = ad.Tensor(np.concatenate(ths).astype(np.float64))

            def f():
                out = model.forward(frames)
                cls = losses.softmax_ce(ad.take_rows(out.cls, rows), labels)
                loc = losses.iou_loss(ad.take_rows(out.dist, pos_rows), loc_t)
                ori = losses.cosine_loss(ad.take_rows(out.theta, pos_rows), th_t)
                return losses.total_loss(cls, loc, ori)

        errs[variant] = check_gradients(f, model.parameters(), rng=rng,
                                        max_coords=max_coords)
    return errs

