"""Synthetic cardiac-like video generator with exact per-frame ground truth.

Each subject gets its own rng seed, base heart size, motion character,
speckle level and background texture phases, so leave-one-subject-out
folds hold out genuinely unseen appearance. The rendered target is a dark
disc on brighter textured background, carrying one of three view textures
(all orientation-bearing) plus a bright rim wedge that pins the rotation
angle. Orientation is measured anti-clockwise from +x with the image
y-axis pointing down; the renderer and annotations share this convention.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

VIEWS = ("4C", "LVOT", "3V")
VIEW_TO_CLASS = {"4C": 1, "LVOT": 2, "3V": 3}
CLASS_TO_VIEW = {v: k for k, v in VIEW_TO_CLASS.items()}

R_MIN = 10.0
R_MAX = 28.0


@dataclass(frozen=True)
class HeartAnnotation:
    """Per-frame ground truth; geometry fields are zero when not visible."""
    visible: bool
    view: Optional[str]  # one of VIEWS, or None when invisible
    cx: float = 0.0
    cy: float = 0.0
    r: float = 0.0
    theta: float = 0.0


@dataclass(frozen=True)
class SubjectParams:
    subject_id: str
    base_radius: float
    motion_smoothness: float  # AR(1) coefficient of the velocity process
    speckle_strength: float   # multiplicative noise sigma
    texture_phase: tuple      # background texture phases/frequencies
    seed: int
    view: Optional[str] = None  # fixed view for the clip; None = draw from rng
    p_gap: float = 0.35         # chance of one contiguous invisible interval
    p_occlusion: float = 0.10   # per-frame chance of a shadow band
    motion_scale: float = 1.0   # 0 freezes the pose across the clip


def subject_params(corpus_seed: int, subject_index: int, clip_index: int = 0,
                   speckle: Optional[float] = None) -> SubjectParams:
    """Deterministic per-subject (and per-clip) generation parameters."""
    ss = np.random.SeedSequence([corpus_seed, subject_index])
    rng = np.random.default_rng(ss)
    base_r = float(rng.uniform(14.0, 23.0))
    smooth = float(rng.uniform(0.80, 0.93))
    spk = float(rng.uniform(0.05, 0.11)) if speckle is None else float(speckle)
    phase = tuple(float(v) for v in rng.uniform(0.0, 1.0, size=4))
    clip_seed = int(np.random.SeedSequence([corpus_seed, subject_index, 7919 + clip_index]).generate_state(1)[0])
    # cycle views across clips so every subject carries all three classes
    view = VIEWS[clip_index % 3]
    return SubjectParams(
        subject_id=f"s{subject_index:02d}",
        base_radius=base_r,
        motion_smoothness=smooth,
        speckle_strength=spk,
        texture_phase=phase,
        seed=clip_seed,
        view=view,
    )


def _wrap_angle(t):
    return np.mod(t, 2.0 * np.pi)


def _render_frame(size, bg_grid, ann: HeartAnnotation, X, Y):
    img = bg_grid.copy()
    if not ann.visible:
        return img
    cx, cy, r, theta = ann.cx, ann.cy, ann.r, ann.theta
    dx = X - cx
    dy = Y - cy
    dist = np.hypot(dx, dy)

    # dark disc with a ~1.5 px soft edge
    w_in = np.clip((r - dist) / 1.5 + 0.5, 0.0, 1.0)
    heart = np.full_like(img, 0.16)

    ct, st = np.cos(theta), np.sin(theta)
    u = ct * dx + st * dy       # along-orientation coordinate
    v = -st * dx + ct * dy
    feat = np.zeros_like(img)
    if ann.view == "4C":
        # four bright chambers in a 2x2 arrangement rotated with theta
        for k in range(4):
            a = theta + np.pi / 4 + k * np.pi / 2
            bx, by = cx + 0.50 * r * np.cos(a), cy + 0.50 * r * np.sin(a)
            feat += 0.62 * np.exp(-((X - bx) ** 2 + (Y - by) ** 2) / (2 * (0.20 * r) ** 2))
    elif ann.view == "LVOT":
        # one elongated outflow-tract ellipse along theta
        feat += 0.72 * np.exp(-(u ** 2 / (2 * (0.55 * r) ** 2) + v ** 2 / (2 * (0.20 * r) ** 2)))
    else:  # 3V
        # three collinear vessels along theta
        for t in (-0.55, 0.0, 0.55):
            bx, by = cx + t * r * ct, cy + t * r * st
            feat += 0.66 * np.exp(-((X - bx) ** 2 + (Y - by) ** 2) / (2 * (0.15 * r) ** 2))
    heart = np.clip(heart + feat, 0.0, 0.92)
    img = (1.0 - w_in) * img + w_in * heart

    # bright rim wedge marking theta (the one cue without angular symmetry);
    # kept mostly outside the disc so the dark-region centroid stays put
    dang = np.angle(np.exp(1j * (np.arctan2(dy, dx) - theta)))
    w_ang = np.clip((0.34 - np.abs(dang)) / 0.10, 0.0, 1.0)
    w_rad = np.clip((dist - 0.80 * r) / 2.0, 0.0, 1.0) * np.clip((1.16 * r - dist) / 2.0, 0.0, 1.0)
    w_wedge = w_ang * w_rad
    img = img * (1.0 - w_wedge) + 0.95 * w_wedge
    return img


def _apply_occlusion(img, rng, size):
    """Dark shadow band across the frame, ultrasound-dropout style."""
    ang = rng.uniform(0.0, np.pi)
    offs = rng.uniform(0.25, 0.75) * size
    half_w = rng.uniform(10.0, 18.0)
    ii, jj = np.mgrid[0:size, 0:size]
    x = jj + 0.5
    y = ii + 0.5
    d = np.abs(np.cos(ang) * x + np.sin(ang) * y - offs)
    band = np.clip((half_w - d) / 3.0, 0.0, 1.0)
    return img * (1.0 - 0.82 * band)


def generate_clip(subject: SubjectParams, n_frames: int, size: int):
    """Render one clip: frames [T,1,size,size] float32 in [0,1] + annotations.

    Deterministic for a fixed SubjectParams. Rejects frames too small to
    contain the largest permitted heart.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if size < 2 * (R_MAX + 4):
        raise ValueError(f"frame size {size} too small for max radius {R_MAX}")

    rng = np.random.default_rng(np.random.SeedSequence(subject.seed))
    ii, jj = np.mgrid[0:size, 0:size]
    X = (jj + 0.5).astype(np.float64)
    Y = (ii + 0.5).astype(np.float64)

    f1, f2, p1, p2 = subject.texture_phase
    bg = (0.58
          + 0.05 * np.sin(2 * np.pi * ((1.0 + 1.3 * f1) * X / size + p1))
          * np.cos(2 * np.pi * ((1.0 + 1.3 * f2) * Y / size + p2)))

    view = subject.view if subject.view is not None else VIEWS[rng.integers(0, 3)]
    r = float(np.clip(subject.base_radius * rng.uniform(0.9, 1.1), R_MIN, R_MAX))
    margin = r + 3.0
    cx = float(rng.uniform(margin, size - margin))
    cy = float(rng.uniform(margin, size - margin))
    theta = float(rng.uniform(0.0, 2.0 * np.pi))

    # one contiguous invisibility gap with probability p_gap
    gap = range(0)
    if n_frames >= 12 and rng.random() < subject.p_gap:
        g_len = int(rng.integers(6, 15))
        g_start = int(rng.integers(1, max(2, n_frames - g_len)))
        gap = range(g_start, min(n_frames, g_start + g_len))

    rho = subject.motion_smoothness
    vx = vy = vr = vth = 0.0
    ms = subject.motion_scale
    sig_v, sig_r, sig_th = 0.55 * ms, 0.10 * ms, 0.055 * ms

    frames = np.empty((n_frames, 1, size, size), dtype=np.float32)
    anns = []
    for t in range(n_frames):
        visible = t not in gap
        if visible:
            ann = HeartAnnotation(True, view, cx, cy, r, float(_wrap_angle(theta)))
        else:
            ann = HeartAnnotation(False, None)
        img = _render_frame(size, bg, ann, X, Y)
        if visible and rng.random() < subject.p_occlusion:
            img = _apply_occlusion(img, rng, size)
        if subject.speckle_strength > 0:
            img = img * (1.0 + subject.speckle_strength * rng.standard_normal((size, size)))
        frames[t, 0] = np.clip(img, 0.0, 1.0)
        anns.append(ann)

        # smooth random-walk motion; reflect at the margins
        vx = rho * vx + sig_v * (1 - rho) ** 0.5 * rng.standard_normal()
        vy = rho * vy + sig_v * (1 - rho) ** 0.5 * rng.standard_normal()
        vr = rho * vr + sig_r * (1 - rho) ** 0.5 * rng.standard_normal()
        vth = rho * vth + sig_th * (1 - rho) ** 0.5 * rng.standard_normal()
        cx, cy, r = cx + vx, cy + vy, float(np.clip(r + vr, R_MIN, R_MAX))
        theta = theta + vth
        margin = r + 3.0
        if cx < margin:
            cx, vx = margin, abs(vx)
        elif cx > size - margin:
            cx, vx = size - margin, -abs(vx)
        if cy < margin:
            cy, vy = margin, abs(vy)
        elif cy > size - margin:
            cy, vy = size - margin, -abs(vy)

    return frames, anns


def quiet_subject(subject: SubjectParams) -> SubjectParams:
    """Copy of the params with noise, gaps and occlusions switched off."""
    return replace(subject, speckle_strength=0.0, p_gap=0.0, p_occlusion=0.0)
