"""Evaluation protocols, hierarchical aggregation, leave-one-subject-out
cross-validation.

Frame correctness rules:
  Protocol-I : view classified correctly and the predicted center within
               0.25 * r_gt of the annotated center.
  Protocol-II: view correct and bounding-square IoU > 0.25.
Both count invisible-vs-invisible as correct and any visibility mismatch
as incorrect. Errors average frames -> video, videos -> subject, subjects
-> report, strictly in that order. Orientation error 0.5*(1 - cos) is
averaged over frames where both ground truth and prediction are visible.
"""

from __future__ import annotations

import math
import os
import sys
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .geometry import box_iou, circle_to_box, Circle
from .gtmaps import FramePrediction
from .phantom import HeartAnnotation
from .network import ModelConfig
from .trainer import TrainConfig, train

METRICS = ("protocol1_error", "protocol2_error", "cls_error", "loc_error", "orient_error")


def protocol1(pred: FramePrediction, gt: HeartAnnotation) -> bool:
    if not gt.visible or not pred.visible:
        return gt.visible == pred.visible
    if pred.view != gt.view:
        return False
    return math.hypot(pred.cx - gt.cx, pred.cy - gt.cy) < 0.25 * gt.r


def protocol2(pred: FramePrediction, gt: HeartAnnotation) -> bool:
    if not gt.visible or not pred.visible:
        return gt.visible == pred.visible
    if pred.view != gt.view:
        return False
    iou = box_iou(circle_to_box(Circle(pred.cx, pred.cy, pred.r)),
                  circle_to_box(Circle(gt.cx, gt.cy, gt.r)))
    return iou > 0.25


def classification_correct(pred: FramePrediction, gt: HeartAnnotation) -> bool:
    """Joint visibility + view decision."""
    if gt.visible != pred.visible:
        return False
    return (not gt.visible) or pred.view == gt.view


def orientation_error(pred_theta: float, gt_theta: float) -> float:
    return 0.5 * (1.0 - math.cos(pred_theta - gt_theta))


def evaluate_video(preds: List[FramePrediction], gts: List[HeartAnnotation]) -> dict:
    """Frame-mean error rates for one video; None where undefined."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} frames")
    p1 = p2 = cls = 0
    loc_fail = loc_n = 0
    ori_sum, ori_n = 0.0, 0
    for pr, gt in zip(preds, gts):
        p1 += not protocol1(pr, gt)
        p2 += not protocol2(pr, gt)
        cls += not classification_correct(pr, gt)
        if gt.visible and pr.visible and pr.view == gt.view:
            loc_n += 1
            loc_fail += not protocol2(pr, gt)
        if gt.visible and pr.visible:
            ori_n += 1
            ori_sum += orientation_error(pr.theta, gt.theta)
    n = len(gts)
    return {
        "protocol1_error": p1 / n,
        "protocol2_error": p2 / n,
        "cls_error": cls / n,
        "loc_error": loc_fail / loc_n if loc_n else None,
        "orient_error": ori_sum / ori_n if ori_n else None,
        "n_frames": n,
    }


@dataclass
class EvalReport:
    protocol1_error: float
    protocol2_error: float
    cls_error: float
    loc_error: Optional[float]
    orient_error: Optional[float]
    per_subject: Dict[str, dict] = field(default_factory=dict)
    n_frames: int = 0

    def as_dict(self):
        d = {m: getattr(self, m) for m in METRICS}
        d["n_frames"] = self.n_frames
        return d


def _mean_skipping_none(values):
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def aggregate(video_results) -> EvalReport:
    """Three-level unweighted mean: frames within a video, videos within a
    subject, then subjects. video_results: (subject, video, preds, gts)."""
    by_subject: Dict[str, list] = {}
    n_frames = 0
    for subject, _video, preds, gts in video_results:
        by_subject.setdefault(subject, []).append(evaluate_video(preds, gts))
        n_frames += len(gts)
    per_subject = {}
    for subject, vids in by_subject.items():
        per_subject[subject] = {m: _mean_skipping_none([v[m] for v in vids]) for m in METRICS}
        per_subject[subject]["n_videos"] = len(vids)
    overall = {m: _mean_skipping_none([s[m] for s in per_subject.values()]) for m in METRICS}
    return EvalReport(per_subject=per_subject, n_frames=n_frames, **overall)


def predict_clips(model, clips) -> list:
    """(subject, clip, preds, gts) for every clip, whole-clip inference."""
    out = []
    for clip in clips:
        frames = np.ascontiguousarray(clip.frames, dtype=np.float32) / 255.0
        frames = frames.reshape(-1, 1, frames.shape[-2], frames.shape[-1])
        preds = model.predict(frames)
        out.append((clip.subject_id, clip.clip_id, preds, clip.annotations))
    return out


def evaluate_model(model, clips) -> EvalReport:
    return aggregate(predict_clips(model, clips))


# ---------------------------------------------------------------------------
# leave-one-subject-out cross-validation


def run_fold(clips, held_out_subject: str, model_config: ModelConfig,
             train_config: TrainConfig) -> EvalReport:
    train_clips = [c for c in clips if c.subject_id != held_out_subject]
    test_clips = [c for c in clips if c.subject_id == held_out_subject]
    if not test_clips:
        raise ValueError(f"no clips for held-out subject {held_out_subject!r}")
    if not any(a.visible for c in test_clips for a in c.annotations):
        warnings.warn(f"fold {held_out_subject}: no visible frames; skipping")
        return None
    model, _trace = train(model_config, train_config, train_clips)
    return evaluate_model(model, test_clips)


def _fold_task(args):
    data_dir, variant, subject, seed, model_kw, train_kw = args
    from . import storage  # local import keeps the worker spawn-safe

    clips = storage.load_dataset(data_dir)
    mcfg = ModelConfig.for_variant(variant, **model_kw)
    tcfg = TrainConfig(variant=variant, seed=seed, **train_kw)
    report = run_fold(clips, subject, mcfg, tcfg)
    fold = {"variant": variant, "subject": subject, "seed": seed}
    if report is not None:
        fold.update(report.as_dict())
    return fold


def crossval(data_dir, variants, seeds, jobs: int = 1, model_kw=None,
             train_kw=None, progress=False) -> Dict[str, dict]:
    """Leave-one-subject-out over every (variant, seed, subject) triple.

    Returns, per variant: per-fold rows, per-seed fold means, and the
    seed-mean summary. Folds run in parallel worker processes when jobs > 1.
    """
    from . import storage

    model_kw = dict(model_kw or {})
    train_kw = dict(train_kw or {})
    subjects = sorted({c.subject_id for c in storage.load_dataset(data_dir)})
    if len(subjects) < 2:
        raise ValueError("cross-validation needs at least 2 subjects")
    tasks = [(str(data_dir), v, s, seed, model_kw, train_kw)
             for v in variants for seed in seeds for s in subjects]

    if jobs > 1:
        import multiprocessing as mp

        os.environ.setdefault("OMP_NUM_THREADS", "1")
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        ctx = mp.get_context("spawn")
        with ctx.Pool(processes=jobs) as pool:
            rows = []
            for k, row in enumerate(pool.imap(_fold_task, tasks)):
                rows.append(row)
                if progress:
                    print(f"  fold {k + 1}/{len(tasks)}: {row['variant']} subject={row['subject']} "
                          f"seed={row['seed']} p1={row.get('protocol1_error')}", file=sys.stderr)
    else:
        rows = []
        for k, task in enumerate(tasks):
            row = _fold_task(task)
            rows.append(row)
            if progress:
                print(f"  fold {k + 1}/{len(tasks)}: {row['variant']} subject={row['subject']} "
                      f"seed={row['seed']} p1={row.get('protocol1_error')}", file=sys.stderr)

    results = {}
    for v in variants:
        v_rows = [r for r in rows if r["variant"] == v and "protocol1_error" in r]
        per_seed = []
        for seed in seeds:
            s_rows = [r for r in v_rows if r["seed"] == seed]
            per_seed.append({"seed": seed, **{
                m: _mean_skipping_none([r[m] for r in s_rows]) for m in METRICS}})
        summary = {m: _mean_skipping_none([s[m] for s in per_seed]) for m in METRICS}
        results[v] = {"folds": v_rows, "per_seed": per_seed, "summary": summary}
    return results
