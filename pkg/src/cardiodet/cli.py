"""Command-line interface.

Commands: gen, train, eval, crossval, predict, gradcheck. Exit codes:
0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import checks, evaluator, storage
from .network import Model, ModelConfig, VARIANTS
from .storage import DataFormatError
from .trainer import TrainConfig, TrainingDiverged, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# per-variant iteration counts for the desk-scale cross-validation profile
DESK_CV_ITERS = {"anchor": 1500, "iou": 500, "temporal-anchor": 300, "temporal-iou": 300}
DESK_CV_BATCH_SEQUENCES = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise SystemExit_Usage(message)


class SystemExit_Usage(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cardiodet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the synthetic phantom corpus")
    g.add_argument("--subjects", type=int, default=12)
    g.add_argument("--clips-per-subject", type=int, default=8)
    g.add_argument("--frames", type=int, default=40)
    g.add_argument("--size", type=int, default=96)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--speckle", type=float, default=None,
                   help="override per-subject speckle strength")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--variant", choices=VARIANTS, required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch", type=int, default=None, help="images per step")
    t.add_argument("--sequences", type=int, default=4, help="clips per temporal step")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--trace", default=None, help="loss trace path (JSON lines)")
    t.add_argument("--ckpt-every", type=int, default=0)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)

    c = sub.add_parser("crossval", help="leave-one-subject-out cross-validation")
    c.add_argument("--data", required=True)
    c.add_argument("--variants", default="anchor,iou,temporal-anchor")
    c.add_argument("--seeds", default="0,1,2")
    c.add_argument("--iters", type=int, default=None, help="override all variants")
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("--out", required=True, help="directory for per-variant reports")

    r = sub.add_parser("predict", help="per-frame predictions for one clip")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--clip", required=True, help="clip directory (frames.bin + annotations.json)")
    r.add_argument("--out", default=None, help="predictions path (default stdout)")
    r.add_argument("--dump-maps", default=None, help="directory for prediction-map images")

    k = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    k.add_argument("--level", choices=("losses", "primitives", "endtoend"), required=True)
    k.add_argument("--seed", type=int, default=0)
    return p


def cmd_gen(args):
    n = storage.build_corpus(args.out, args.subjects, args.clips_per_subject,
                             args.frames, args.size, args.seed, speckle=args.speckle)
    print(f"wrote {n} clips ({args.subjects} subjects x {args.clips_per_subject}) to {args.out}")
    return EXIT_OK


def cmd_train(args):
    clips = storage.load_dataset(args.data)
    mcfg = ModelConfig.for_variant(args.variant)
    iters = args.iters if args.iters is not None else DESK_CV_ITERS[args.variant]
    tcfg = TrainConfig(variant=args.variant, iters=iters, lr=args.lr,
                       batch_images=args.batch, batch_sequences=args.sequences,
                       seed=args.seed, checkpoint_every=args.ckpt_every)

    def save_intermediate(iteration, model, trace):
        storage.save_checkpoint(f"{args.out}.it{iteration}", model)

    model, trace = train(mcfg, tcfg, clips,
                         callback=save_intermediate if args.ckpt_every else None)
    storage.save_checkpoint(args.out, model)
    if args.trace:
        storage.write_jsonl(args.trace, trace)
    print(f"trained {args.variant} for {iters} iterations; "
          f"final loss {trace[-1]['total']:.4f}; checkpoint at {args.out}")
    return EXIT_OK


def _report_records(tag, report):
    yield {"record": "meta", "tag": tag, "metrics": list(evaluator.METRICS)}
    for subject, row in sorted(report.per_subject.items()):
        yield {"record": "subject", "subject": subject, **row}
    yield {"record": "overall", **report.as_dict()}


def cmd_eval(args):
    model = storage.load_checkpoint(args.ckpt)
    clips = storage.load_dataset(args.data)
    report = evaluator.evaluate_model(model, clips)
    storage.write_jsonl(args.report, _report_records(args.ckpt, report))
    for m in evaluator.METRICS:
        v = getattr(report, m)
        print(f"{m}: {v:.4f}" if v is not None else f"{m}: n/a")
    return EXIT_OK


def cmd_crossval(args):
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in VARIANTS:
            raise SystemExit_Usage(f"unknown variant {v!r}")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    started = time.time()
    results = {}
    for v in variants:
        iters = args.iters if args.iters is not None else DESK_CV_ITERS[v]
        train_kw = {"iters": iters}
        if v.startswith("temporal-"):
            train_kw["batch_sequences"] = DESK_CV_BATCH_SEQUENCES
        res = evaluator.crossval(args.data, [v], seeds, jobs=args.jobs,
                                 train_kw=train_kw, progress=True)[v]
        results[v] = res
        rows = [{"record": "meta", "variant": v, "seeds": seeds, "iters": iters}]
        rows += [{"record": "fold", **r} for r in res["folds"]]
        rows += [{"record": "seed_mean", **s} for s in res["per_seed"]]
        rows.append({"record": "summary", **res["summary"]})
        storage.write_jsonl(out_dir / f"crossval_{v}.jsonl", rows)

    print(f"\n{'variant':>18} | {'Proto-I':>8} {'Proto-II':>8} {'Class.':>8} "
          f"{'Local.':>8} {'Orient.':>8}")
    for v in variants:
        s = results[v]["summary"]

        def fmt(m):
            return f"{s[m]:8.3f}" if s[m] is not None else "     n/a"

        print(f"{v:>18} | {fmt('protocol1_error')} {fmt('protocol2_error')} "
              f"{fmt('cls_error')} {fmt('loc_error')} {fmt('orient_error')}")
    print(f"elapsed: {time.time() - started:.0f}s")
    return EXIT_OK


def _write_pgm(path, arr):
    """8-bit binary PGM; arr is [h,w] uint8."""
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def _dump_maps(model, frames, out_dir):
    from .network import _softmax

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = model.forward(frames)
    t, h, w = out.n_frames, out.map_h, out.map_w
    cfg = model.config
    probs = _softmax(out.cls.data)
    if cfg.head == "iou":
        maps = np.concatenate([probs.reshape(t, h, w, 4).transpose(0, 3, 1, 2),
                               out.dist.data.reshape(t, h, w, 4).transpose(0, 3, 1, 2),
                               out.theta.data.reshape(t, 1, h, w)], axis=1)
    else:
        a = len(cfg.radii)
        pr = probs.reshape(t, h * w, a, 4)
        best = np.argmax(pr.max(axis=3), axis=2)  # [t, hw] best anchor per cell
        rows = np.take_along_axis(pr, best[:, :, None, None], axis=2)[:, :, 0]
        reg = out.reg.data.reshape(t, h * w, a, 3)
        reg_b = np.take_along_axis(reg, best[:, :, None, None], axis=2)[:, :, 0]
        th = np.take_along_axis(out.theta.data.reshape(t, h * w, a), best[:, :, None], axis=2)
        maps = np.concatenate([rows.reshape(t, h, w, 4).transpose(0, 3, 1, 2),
                               reg_b.reshape(t, h, w, 3).transpose(0, 3, 1, 2),
                               th.reshape(t, 1, h, w),
                               np.zeros((t, 1, h, w), dtype=probs.dtype)], axis=1)
    names = (["cls_bg", "cls_4C", "cls_LVOT", "cls_3V", "loc_xt", "loc_xb",
              "loc_xl", "loc_xr", "ori"] if cfg.head == "iou" else
             ["cls_bg", "cls_4C", "cls_LVOT", "cls_3V", "reg_tx", "reg_ty",
              "reg_tr", "ori", "unused"])
    sidecar = []
    for f in range(t):
        for mi, name in enumerate(names):
            arr = maps[f, mi].astype(np.float64)
            lo, hi = float(arr.min()), float(arr.max())
            scaled = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
            fname = f"frame{f:04d}_{name}.pgm"
            _write_pgm(out_dir / fname, np.round(scaled * 255).astype(np.uint8))
            sidecar.append({"file": fname, "frame": f, "map": name, "min": lo, "max": hi})
    storage.write_jsonl(out_dir / "maps_index.jsonl", sidecar)


def cmd_predict(args):
    model = storage.load_checkpoint(args.ckpt)
    clip_dir = Path(args.clip)
    clip = storage.load_clip(clip_dir, clip_dir.parent.name, clip_dir.name)
    frames = clip.frames.astype(np.float32).reshape(-1, 1, *clip.frames.shape[-2:]) / 255.0
    preds = model.predict(frames)
    records = [{"frame": i, "visible": p.visible, "view": p.view, "cx": p.cx,
                "cy": p.cy, "r": p.r, "theta": p.theta, "score": p.score,
                "source": list(p.source), "anchor": p.anchor}
               for i, p in enumerate(preds)]
    if args.out:
        storage.write_jsonl(args.out, records)
    else:
        for rec in records:
            print(json.dumps(rec, sort_keys=True))
    if args.dump_maps:
        _dump_maps(model, frames, args.dump_maps)
    return EXIT_OK


def cmd_gradcheck(args):
    suites = {"primitives": checks.check_primitives, "losses": checks.check_losses,
              "endtoend": checks.check_end_to_end}
    errs = suites[args.level](seed=args.seed)
    worst = max(errs.values())
    for name in sorted(errs, key=errs.get, reverse=True):
        print(f"  {name:>24}: max rel err {errs[name]:.3e}")
    if worst <= 1e-3:
        print(f"PASS, max rel err {worst:.3e}")
        return EXIT_OK
    print(f"FAIL, max rel err {worst:.3e}")
    return EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit_Usage as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # argparse's own --help path
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    handlers = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
                "crossval": cmd_crossval, "predict": cmd_predict,
                "gradcheck": cmd_gradcheck}
    try:
        return handlers[args.command](args)
    except SystemExit_Usage as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, NotADirectoryError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
