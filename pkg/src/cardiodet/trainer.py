"""Optimization loops for all model variants.

SGD with momentum 0.9 and global-norm gradient clipping. Batch sizes and
learning rates default per variant; the full-scale reference values are in
network.PAPER_SCALE. Losses are means over anchors/locations with count
scaling folded into the learning rate. Temporal variants train on randomly
re-split 25-50 frame clips, re-drawn each epoch with fresh offsets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .anchors import assign_labels, make_anchor_grid, sample_minibatch
from .gtmaps import build_gt_maps
from .losses import LossWeights, cosine_loss, iou_loss, smooth_l1, softmax_ce, total_loss
from .network import Model, ModelConfig

# desk-scale defaults; the paper-scale counterparts live in network.PAPER_SCALE
DESK_LR = {"anchor": 0.01, "iou": 0.01, "temporal-anchor": 0.01, "temporal-iou": 0.01}
DESK_BATCH_IMAGES = {"anchor": 1, "iou": 8}
DESK_ITERS = 20_000

MIN_CLIP = 25
MAX_CLIP = 50


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, last_loss):
        super().__init__(f"loss became non-finite at iteration {iteration}; "
                         f"last finite total loss was {last_loss:.6g}")
        self.iteration = iteration
        self.last_loss = last_loss


@dataclass
class TrainConfig:
    variant: str = "anchor"
    iters: int = DESK_ITERS
    lr: Optional[float] = None          # None -> DESK_LR[variant]
    momentum: float = 0.9
    clip_norm: float = 10.0
    batch_images: Optional[int] = None  # None -> per-variant default
    batch_sequences: int = 4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    anchor_sample: int = 256
    positive_cap: int = 64
    checkpoint_every: int = 0

    def resolved_lr(self):
        return DESK_LR[self.variant] if self.lr is None else self.lr

    def resolved_batch(self):
        if self.batch_images is not None:
            return self.batch_images
        return DESK_BATCH_IMAGES["iou" if self.variant.endswith("iou") else "anchor"]


def sample_sequences(videos, rng_seed):
    """Split every video into contiguous random-length clips of 25-50 frames.

    Returns (video_index, start, length) triples. A random small offset is
    drawn per video so boundaries move between epochs; a remainder shorter
    than 25 frames is merged into the previous clip.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) \
        else np.random.default_rng(rng_seed)
    clips = []
    for vi, video in enumerate(videos):
        n = video.n_frames if hasattr(video, "n_frames") else len(video)
        if n < MIN_CLIP:
            raise ValueError(f"video {vi} has {n} frames; need at least {MIN_CLIP}")
        off = int(rng.integers(0, min(15, n - MIN_CLIP) + 1)) if n > MIN_CLIP else 0
        pos = off
        while n - pos >= MIN_CLIP:
            length = int(rng.integers(MIN_CLIP, MAX_CLIP + 1))
            if n - pos - length < MIN_CLIP:
                length = n - pos  # keep if >= MIN_CLIP, else merge the tail
            clips.append((vi, pos, length))
            pos += length
    return clips


@dataclass
class _FrameEntry:
    clip_index: int
    t: int
    index: int = 0
    targets: object = None   # AnchorTargets, lazy
    sample: object = None    # fixed per-image 256-anchor sample, lazy
    maps: object = None      # flattened gt-map arrays, lazy


class _TrainData:
    """Float frames plus per-frame supervision caches for one dataset."""

    def __init__(self, videos, model_config: ModelConfig, seed: int = 0):
        if not videos:
            raise ValueError("training dataset is empty")
        self.videos = videos
        self.cfg = model_config
        self.seed = seed
        first = videos[0].frames
        self.hin, self.win = first.shape[-2], first.shape[-1]
        s = model_config.stride
        self.map_h, self.map_w = self.hin // s, self.win // s
        self.grid = make_anchor_grid(self.map_h, self.map_w, s, model_config.radii)
        self.frames = [np.ascontiguousarray(v.frames, dtype=np.float32).reshape(
            -1, 1, self.hin, self.win) / (255.0 if v.frames.dtype == np.uint8 else 1.0)
            for v in videos]
        self.entries = [_FrameEntry(ci, t)
                        for ci, v in enumerate(videos) for t in range(len(v.annotations))]
        for k, e in enumerate(self.entries):
            e.index = k
        self.entries_by_video = {}
        for e in self.entries:
            self.entries_by_video.setdefault(e.clip_index, {})[e.t] = e

    def frame(self, entry):
        return self.frames[entry.clip_index][entry.t]

    def ann(self, entry):
        return self.videos[entry.clip_index].annotations[entry.t]

    def anchor_targets(self, entry):
        if entry.targets is None:
            entry.targets = assign_labels(self.grid, self.ann(entry))
        return entry.targets

    def anchor_sample(self, entry, n_sample, positive_cap):
        """The image's fixed 256-anchor training sample (seeded per frame)."""
        if entry.sample is None:
            tg = self.anchor_targets(entry)
            rng = np.random.default_rng(
                np.random.SeedSequence([self.seed, 0xA9C, entry.index]))
            entry.sample = sample_minibatch(tg, rng, n_sample, positive_cap)
        return entry.sample

    def gt_maps_flat(self, entry):
        if entry.maps is None:
            m = build_gt_maps(self.ann(entry), self.map_h, self.map_w, self.cfg.stride)
            entry.maps = {
                "cls": np.argmax(m.cls, axis=0).reshape(-1).astype(np.int64),
                "valid": m.valid_mask.reshape(-1) > 0,
                "pos": m.pos_mask.reshape(-1) > 0,
                "loc": m.loc.reshape(4, -1).T.astype(np.float64),
                "ori": m.ori.reshape(-1).astype(np.float64),
            }
        return entry.maps


def _anchor_losses(out, data, entries, tcfg, dtype):
    """Classification over sampled anchors, regression over positives.

    Returns mean-valued loss tensors plus the anchor counts; the trainer
    optimizes the count-scaled sums (per-anchor losses are summed over the
    mini-batch, with normalization folded into the learning rate).
    """
    n_anchor = data.grid.n_anchors
    rows, labels = [], []
    pos_rows, reg_t, th_t = [], [], []
    for b, entry in enumerate(entries):
        tg = data.anchor_targets(entry)
        sel = data.anchor_sample(entry, tcfg.anchor_sample, tcfg.positive_cap)
        rows.append(sel + b * n_anchor)
        labels.append(np.maximum(tg.labels[sel], 0))
        pos = tg.positive_indices
        if pos.size:
            pos_rows.append(pos + b * n_anchor)
            reg_t.append(np.stack([tg.tx[pos], tg.ty[pos], tg.tr[pos]], axis=1))
            th_t.append(tg.theta[pos])
    rows = np.concatenate(rows)
    labels = np.concatenate(labels)
    cls = softmax_ce(ad.take_rows(out.cls, rows), labels)
    if pos_rows:
        pos_rows = np.concatenate(pos_rows)
        reg_t = Tensor(np.concatenate(reg_t).astype(dtype))
        th_t = Tensor(np.concatenate(th_t).astype(dtype))
        loc = smooth_l1(ad.take_rows(out.reg, pos_rows), reg_t)
        ori = cosine_loss(ad.take_rows(out.theta, pos_rows), th_t)
        n_pos = pos_rows.size
    else:
        loc = Tensor(np.asarray(0.0, dtype=dtype))
        ori = Tensor(np.asarray(0.0, dtype=dtype))
        n_pos = 0
    return cls, loc, ori, rows.size, n_pos


def _iou_losses(out, data, entries, dtype):
    """Classification over valid locations, box/angle over positives."""
    hw = data.map_h * data.map_w
    rows, labels = [], []
    pos_rows, loc_t, th_t = [], [], []
    for b, entry in enumerate(entries):
        m = data.gt_maps_flat(entry)
        valid = np.flatnonzero(m["valid"])
        rows.append(valid + b * hw)
        labels.append(m["cls"][valid])
        pos = np.flatnonzero(m["pos"])
        if pos.size:
            pos_rows.append(pos + b * hw)
            loc_t.append(m["loc"][pos])
            th_t.append(m["ori"][pos])
    rows = np.concatenate(rows)
    labels = np.concatenate(labels)
    cls = softmax_ce(ad.take_rows(out.cls, rows), labels)
    if pos_rows:
        pos_rows = np.concatenate(pos_rows)
        loc_t = Tensor(np.concatenate(loc_t).astype(dtype))
        th_t = Tensor(np.concatenate(th_t).astype(dtype))
        loc = iou_loss(ad.take_rows(out.dist, pos_rows), loc_t)
        ori = cosine_loss(ad.take_rows(out.theta, pos_rows), th_t)
        n_pos = pos_rows.size
    else:
        loc = Tensor(np.asarray(0.0, dtype=dtype))
        ori = Tensor(np.asarray(0.0, dtype=dtype))
        n_pos = 0
    return cls, loc, ori, rows.size, n_pos


class _SGD:
    def __init__(self, params, lr, momentum, clip_norm):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self):
        sq = 0.0
        for p in self.params:
            if p.grad is not None:
                sq += float((p.grad.astype(np.float64) ** 2).sum())
        norm = np.sqrt(sq)
        clipped = self.clip_norm > 0 and norm > self.clip_norm
        scale = self.clip_norm / norm if clipped else 1.0
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad * scale
            p.data -= (self.lr * v).astype(p.data.dtype)
        return clipped, norm


def train(model_config: ModelConfig, train_config: TrainConfig, videos,
          callback: Optional[Callable] = None):
    """Train a fresh model; returns (model, loss trace).

    The trace has one record per iteration: iteration index, the three loss
    components, the weighted total, and whether clipping fired. Training
    aborts with TrainingDiverged if the loss leaves the finite range.
    """
    if train_config.variant != model_config.variant:
        raise ValueError(f"config variant mismatch: {train_config.variant!r} "
                         f"vs model {model_config.variant!r}")
    data = _TrainData(videos, model_config, seed=train_config.seed)
    model = Model(model_config, seed=train_config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([train_config.seed, 0xDA7A]))
    opt = _SGD(model.parameters(), train_config.resolved_lr(),
               train_config.momentum, train_config.clip_norm)
    dtype = model_config.np_dtype
    use_iou = model_config.head == "iou"
    temporal = model_config.temporal

    clip_queue = []
    trace = []
    last_finite = float("nan")
    for it in range(train_config.iters):
        if temporal:
            blocks = []
            for _ in range(train_config.batch_sequences):
                if not clip_queue:
                    clip_queue = sample_sequences(data.videos, rng)
                    order = rng.permutation(len(clip_queue))
                    clip_queue = [clip_queue[k] for k in order]
                blocks.append(clip_queue.pop())
            comp = []
            for vi, start, length in blocks:
                frames = data.frames[vi][start:start + length]
                out = model.forward(frames)
                entries = [data.entries_by_video[vi][start + t] for t in range(length)]
                if use_iou:
                    comp.append(_iou_losses(out, data, entries, dtype))
                else:
                    comp.append(_anchor_losses(out, data, entries, train_config, dtype))
        else:
            batch = train_config.resolved_batch()
            pick = rng.integers(0, len(data.entries), size=batch)
            entries = [data.entries[k] for k in pick]
            frames = np.stack([data.frame(e) for e in entries])
            out = model.forward(frames)
            if use_iou:
                comp = [_iou_losses(out, data, entries, dtype)]
            else:
                comp = [_anchor_losses(out, data, entries, train_config, dtype)]

        # per-anchor losses are summed over the mini-batch (scaling folded
        # into the learning rate); the trace keeps the per-anchor means
        n_cls = sum(c[3] for c in comp)
        n_pos = sum(c[4] for c in comp)
        cls = _weighted_sum([c[0] for c in comp], [c[3] for c in comp])
        loc = _weighted_sum([c[1] for c in comp], [c[4] for c in comp])
        ori = _weighted_sum([c[2] for c in comp], [c[4] for c in comp])
        loss = total_loss(cls, loc, ori, train_config.weights)
        total = float(loss.data)
        if not np.isfinite(total):
            raise TrainingDiverged(it, last_finite)
        last_finite = total
        model.zero_grad()
        ad.backward(loss)
        clipped, gnorm = opt.step()
        trace.append({"iter": it,
                      "cls": float(cls.data) / max(1, n_cls),
                      "loc": float(loc.data) / max(1, n_pos),
                      "ori": float(ori.data) / max(1, n_pos),
                      "total": total, "grad_norm": float(gnorm),
                      "clipped": bool(clipped)})
        if callback and train_config.checkpoint_every > 0 \
                and (it + 1) % train_config.checkpoint_every == 0:
            callback(it + 1, model, trace)
    return model, trace


def _weighted_sum(tensors, counts):
    parts = [ad.scale(t, n) for t, n in zip(tensors, counts) if n > 0]
    if not parts:
        return ad.scale(tensors[0], 0.0)
    acc = parts[0]
    for t in parts[1:]:
        acc = ad.add(acc, t)
    return acc
