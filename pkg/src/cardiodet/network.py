"""The detection model: small conv backbone, shared 3x3 sliding-window
feature layer, two head variants, and region-level bidirectional LSTM.

Head variants:
  anchor - per location and per anchor radius: 4 class logits, (tx, ty, tr)
           offsets relative to the anchor circle, and an orientation angle.
  iou    - per location: 4 class logits, 4 strictly positive side distances
           (stride * softplus of the raw outputs, i.e. the raw outputs live
           at feature-map scale and are projected to input pixels), and an
           orientation angle. 9 maps in total.

With temporal enabled, the shared window feature layer is replaced by a
bidirectional LSTM that runs over the clip independently at every map
location with shared weights; its input is the 3x3 neighborhood of the
final conv map linearly projected to the window dimension.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .anchors import DESK_RADII, PAPER_RADII, make_anchor_grid
from .gtmaps import FramePrediction, select_prediction
from .phantom import CLASS_TO_VIEW

VARIANTS = ("anchor", "iou", "temporal-anchor", "temporal-iou")

# full-scale values from the original design, kept for reference; the desk
# configuration below is what trains in minutes on a CPU
PAPER_SCALE = {
    "window_dim": 512,
    "lstm_hidden": 256,
    "radii": PAPER_RADII,
    "stride": 16,
    "iterations": 500_000,
    "rnn_iterations": 50_000,
    "lr_anchor": 0.01,
    "lr_iou": 1e-6,
    "lr_rnn": 0.01,
}


@dataclass
class ModelConfig:
    head: str = "anchor"            # "anchor" | "iou"
    temporal: bool = False
    in_channels: int = 1
    # channels per conv layer, one group per pooling stage (pool after each
    # group); a trailing group beyond the pool count runs at final resolution
    conv_plan: tuple = ((16,), (16, 32), (32, 64), (64,))
    n_pools: int = 3
    window_dim: int = 64
    lstm_hidden: int = 32
    radii: tuple = DESK_RADII
    tau: float = 0.5
    n_classes: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        if self.head not in ("anchor", "iou"):
            raise ValueError(f"unknown head variant {self.head!r}")
        if self.window_dim <= 0 or self.lstm_hidden <= 0:
            raise ValueError("window_dim and lstm_hidden must be positive")
        self.conv_plan = tuple(tuple(g) for g in self.conv_plan)
        self.radii = tuple(float(r) for r in self.radii)
        if not 1 <= self.n_pools <= len(self.conv_plan):
            raise ValueError(f"n_pools={self.n_pools} incompatible with "
                             f"{len(self.conv_plan)} conv groups")

    @property
    def stride(self):
        return 2 ** self.n_pools

    @property
    def feat_channels(self):
        return self.conv_plan[-1][-1]

    @property
    def head_in(self):
        return 2 * self.lstm_hidden if self.temporal else self.window_dim

    @property
    def variant(self):
        return ("temporal-" if self.temporal else "") + self.head

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @classmethod
    def for_variant(cls, variant: str, **kw) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        temporal = variant.startswith("temporal-")
        return cls(head=variant.removeprefix("temporal-"), temporal=temporal, **kw)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(map(tuple, v)) if k == "conv_plan" else
                      (tuple(v) if k == "radii" else v) for k, v in d.items()})


@dataclass
class HeadOut:
    """Raw head outputs for a batch of T frames, flattened t-major."""
    variant: str
    n_frames: int
    map_h: int
    map_w: int
    cls: Tensor                    # [T*hw(*A), 4] logits
    theta: Tensor                  # [T*hw(*A)]
    reg: Optional[Tensor] = None   # anchor head: [T*hw*A, 3]
    dist: Optional[Tensor] = None  # iou head: [T*hw, 4], positive pixels


def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class RecurrentState:
    """Zero-initialized per-location hidden/cell state for one direction."""

    def __init__(self, n_locations, hidden, dtype):
        z = np.zeros((n_locations, hidden), dtype=dtype)
        self.h = Tensor(z)
        self.c = Tensor(z.copy())


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._grids = {}
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0DE]))
        dt = config.np_dtype

        c_in = config.in_channels
        li = 0
        for group in config.conv_plan:
            for c_out in group:
                self._add(f"conv{li}_w", _uniform(rng, (c_out, c_in, 3, 3), c_in * 9, dt))
                self._add(f"conv{li}_b", np.zeros(c_out, dtype=dt))
                c_in = c_out
                li += 1

        c_feat, d = config.feat_channels, config.window_dim
        if config.temporal:
            h = config.lstm_hidden
            self._add("proj_w", _uniform(rng, (d, c_feat, 3, 3), c_feat * 9, dt))
            self._add("proj_b", np.zeros(d, dtype=dt))
            for dirn in ("f", "r"):
                self._add(f"lstm_{dirn}_wx", _uniform(rng, (d, 4 * h), d, dt))
                self._add(f"lstm_{dirn}_wh", _uniform(rng, (h, 4 * h), h, dt))
                b = np.zeros(4 * h, dtype=dt)
                b[h:2 * h] = 1.0  # forget gate opens at init
                self._add(f"lstm_{dirn}_b", b)
        else:
            self._add("win_w", _uniform(rng, (d, c_feat, 3, 3), c_feat * 9, dt))
            self._add("win_b", np.zeros(d, dtype=dt))

        f_in = config.head_in
        a = len(config.radii)
        # heads start near zero so the initial class posterior is uniform
        if config.head == "anchor":
            shapes = {"cls": a * 4, "reg": a * 3, "theta": a}
        else:
            shapes = {"cls": 4, "dist": 4, "theta": 1}
        for task, width in shapes.items():
            self._add(f"head_{task}_w",
                      rng.uniform(-0.03, 0.03, size=(f_in, width)).astype(dt))
            bias = np.zeros(width, dtype=dt)
            if task == "dist":
                bias[:] = 2.0  # softplus(2)*stride ~ 17 px starting box scale
            self._add(f"head_{task}_b", bias)

    def _add(self, name, arr):
        self.params[name] = Tensor(arr, requires_grad=True, name=name)

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def anchor_grid(self, map_h, map_w):
        key = (map_h, map_w)
        if key not in self._grids:
            self._grids[key] = make_anchor_grid(map_h, map_w, self.config.stride,
                                                self.config.radii)
        return self._grids[key]

    # ------------------------------------------------------------------
    # forward pieces

    def backbone(self, frames: Tensor) -> Tensor:
        """Conv stack: [N,1,H,W] -> [N,C,H/stride,W/stride]."""
        n, c, hin, win = frames.data.shape
        s = self.config.stride
        if hin % s or win % s:
            raise ad.ShapeError(f"backbone: input {hin}x{win} not divisible by stride {s}")
        x = frames
        li = 0
        for gi, group in enumerate(self.config.conv_plan):
            for _ in group:
                x = ad.relu(ad.conv2d(x, self.params[f"conv{li}_w"],
                                      self.params[f"conv{li}_b"], stride=1, pad=1))
                li += 1
            if gi < self.config.n_pools:
                x = ad.maxpool2(x)
        return x

    def window_features(self, fmap: Tensor) -> Tensor:
        """Shared 3x3-window fc layer: [N,C,h,w] -> [N*h*w, D], t-major."""
        z = ad.relu(ad.conv2d(fmap, self.params["win_w"], self.params["win_b"],
                              stride=1, pad=1))
        n, d, h, w = z.data.shape
        return ad.reshape(ad.permute(z, (0, 2, 3, 1)), (n * h * w, d))

    def _lstm_pass(self, xs, dirn: str, n_loc: int):
        """One direction over the clip; xs is a list of [n_loc, D] tensors."""
        cfg = self.config
        wx = self.params[f"lstm_{dirn}_wx"]
        wh = self.params[f"lstm_{dirn}_wh"]
        b = self.params[f"lstm_{dirn}_b"]
        hdim = cfg.lstm_hidden
        state = RecurrentState(n_loc, hdim, cfg.np_dtype)
        h, c = state.h, state.c
        order = range(len(xs)) if dirn == "f" else range(len(xs) - 1, -1, -1)
        outs = [None] * len(xs)
        for t in order:
            z = ad.add(ad.add_row(ad.matmul(h, wh), b), ad.matmul(xs[t], wx))
            gi = ad.sigmoid(z[:, 0 * hdim:1 * hdim])
            gf = ad.sigmoid(z[:, 1 * hdim:2 * hdim])
            gg = ad.tanh(z[:, 2 * hdim:3 * hdim])
            go = ad.sigmoid(z[:, 3 * hdim:4 * hdim])
            c = ad.add(ad.mul(gf, c), ad.mul(gi, gg))
            h = ad.mul(go, ad.tanh(c))
            outs[t] = h
        return outs

    def bilstm_step(self, window_feats: Tensor, n_frames: int) -> Tensor:
        """Bidirectional pass over a clip of projected window features.

        window_feats: [T*hw, D] t-major; returns [T*hw, 2H] t-major, the
        concatenation of the forward and backward hidden sequences.
        """
        if n_frames < 1:
            raise ValueError("bilstm_step: clip must contain at least one frame")
        n_loc = window_feats.data.shape[0] // n_frames
        xs = [window_feats[t * n_loc:(t + 1) * n_loc] for t in range(n_frames)]
        fwd = self._lstm_pass(xs, "f", n_loc)
        bwd = self._lstm_pass(xs, "r", n_loc)
        per_t = [ad.concat([fwd[t], bwd[t]], axis=1) for t in range(n_frames)]
        return ad.concat(per_t, axis=0)

    def temporal_features(self, fmap: Tensor, n_frames: int) -> Tensor:
        """3x3 neighborhood linear projection, then the bidirectional pass."""
        z = ad.conv2d(fmap, self.params["proj_w"], self.params["proj_b"],
                      stride=1, pad=1)
        n, d, h, w = z.data.shape
        flat = ad.reshape(ad.permute(z, (0, 2, 3, 1)), (n * h * w, d))
        return self.bilstm_step(flat, n_frames)

    def heads(self, features: Tensor) -> dict:
        """Per-location task outputs from shared features [n, head_in]."""
        cfg = self.config
        out = {}
        for task in ("cls", "reg", "theta") if cfg.head == "anchor" else ("cls", "dist", "theta"):
            w = self.params[f"head_{task}_w"]
            b = self.params[f"head_{task}_b"]
            out[task] = ad.linear(features, w, b)
        if cfg.head == "anchor":
            a = len(cfg.radii)
            n = features.data.shape[0]
            out["cls"] = ad.reshape(out["cls"], (n * a, 4))
            out["reg"] = ad.reshape(out["reg"], (n * a, 3))
            out["theta"] = ad.reshape(out["theta"], (n * a,))
        else:
            out["dist"] = ad.scale(ad.softplus(out["dist"]), float(cfg.stride))
            out["theta"] = ad.reshape(out["theta"], (features.data.shape[0],))
        return out

    # ------------------------------------------------------------------

    def forward(self, frames: np.ndarray) -> HeadOut:
        """Full forward pass on a [T,1,H,W] float block (clip or batch)."""
        cfg = self.config
        x = Tensor(np.ascontiguousarray(frames, dtype=cfg.np_dtype))
        fmap = self.backbone(x)
        t = frames.shape[0]
        h, w = fmap.data.shape[2], fmap.data.shape[3]
        if cfg.temporal:
            feats = self.temporal_features(fmap, t)
        else:
            feats = self.window_features(fmap)
        out = self.heads(feats)
        return HeadOut(variant=cfg.variant, n_frames=t, map_h=h, map_w=w,
                       cls=out["cls"], theta=out["theta"],
                       reg=out.get("reg"), dist=out.get("dist"))

    def predict(self, frames: np.ndarray) -> list:
        """Decode per-frame predictions; no gradients are recorded."""
        flags = [(p, p.requires_grad) for p in self.params.values()]
        for p, _ in flags:
            p.requires_grad = False
        try:
            out = self.forward(frames)
        finally:
            for p, was in flags:
                p.requires_grad = was
        return decode_predictions(out, self.config)


def _softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def decode_predictions(out: HeadOut, config: ModelConfig) -> list:
    t, h, w = out.n_frames, out.map_h, out.map_w
    hw = h * w
    probs = _softmax(out.cls.data)
    preds = []
    if config.head == "iou":
        probs = probs.reshape(t, h, w, 4).transpose(0, 3, 1, 2)
        dist = out.dist.data.reshape(t, h, w, 4).transpose(0, 3, 1, 2)
        ori = out.theta.data.reshape(t, 1, h, w)
        for f in range(t):
            preds.append(select_prediction(probs[f], dist[f], ori[f],
                                           config.stride, config.tau))
        return preds

    a = len(config.radii)
    grid = make_anchor_grid(h, w, config.stride, config.radii)
    fg = probs[:, 1:4]
    for f in range(t):
        rows = slice(f * hw * a, (f + 1) * hw * a)
        fg_f = fg[rows]
        best_row = int(np.argmax(fg_f.max(axis=1)))
        score = float(fg_f[best_row].max())
        loc, k = divmod(best_row, a)
        i, j = divmod(loc, w)
        if score < config.tau:
            preds.append(FramePrediction(False, None, score=score,
                                         source=(i, j), anchor=k))
            continue
        view = CLASS_TO_VIEW[int(np.argmax(fg_f[best_row])) + 1]
        flat = f * hw * a + best_row
        tx, ty, tr = out.reg.data[flat]
        acx, acy, ar = grid.cx[best_row], grid.cy[best_row], grid.r[best_row]
        preds.append(FramePrediction(
            True, view,
            cx=float(acx + tx * ar), cy=float(acy + ty * ar),
            r=float(ar * np.exp(tr)), theta=float(out.theta.data[flat]),
            score=score, source=(i, j), anchor=k))
    return preds
