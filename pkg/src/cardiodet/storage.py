"""File formats: video dataset, model checkpoints, reports and traces.

Dataset layout: DIR/subject_<id>/clip_<id>/frames.bin + annotations.json.
frames.bin is magic "FHV1", three u32 LE (width, height, frame count),
then 8-bit grayscale frames, row-major within a frame, frame-major.

Checkpoint: magic "FHN1", u32 LE header length, a UTF-8 JSON header with
the model config and a tensor manifest (name, shape, byte offset into the
payload), then the tensors as float32 LE in manifest order.

Reports and loss traces are JSON-lines text: one object per line.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

from .network import Model, ModelConfig
from .phantom import VIEWS, HeartAnnotation

DATASET_MAGIC = b"FHV1"
CHECKPOINT_MAGIC = b"FHN1"


class DataFormatError(ValueError):
    """Malformed input file; message names the offending offset or field."""


@dataclass
class ClipRecord:
    subject_id: str
    clip_id: str
    frames: np.ndarray  # [T,H,W] uint8
    annotations: List[HeartAnnotation]

    @property
    def n_frames(self):
        return self.frames.shape[0]

    def __len__(self):
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# dataset


def write_frames_bin(path, frames: np.ndarray):
    if frames.ndim != 3 or frames.dtype != np.uint8:
        raise ValueError(f"expected [T,H,W] uint8 frames, got {frames.shape} {frames.dtype}")
    t, h, w = frames.shape
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<III", w, h, t))
        f.write(np.ascontiguousarray(frames).tobytes())


def read_frames_bin(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated header, file is {len(raw)} bytes (need 16)")
    if raw[:4] != DATASET_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r} at offset 0, expected {DATASET_MAGIC!r}")
    w, h, t = struct.unpack("<III", raw[4:16])
    expected = 16 + w * h * t
    if len(raw) != expected:
        raise DataFormatError(f"{path}: payload length mismatch at offset 16: "
                              f"header promises {expected - 16} bytes, found {len(raw) - 16}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(t, h, w).copy()


def _ann_to_json(a: HeartAnnotation) -> dict:
    return {"visible": bool(a.visible), "view": a.view, "cx": float(a.cx),
            "cy": float(a.cy), "r": float(a.r), "theta": float(a.theta)}


def _ann_from_json(d: dict, path, index) -> HeartAnnotation:
    for key in ("visible", "view", "cx", "cy", "r", "theta"):
        if key not in d:
            raise DataFormatError(f"{path}: record {index} is missing field {key!r}")
    if d["view"] is not None and d["view"] not in VIEWS:
        raise DataFormatError(f"{path}: record {index} has unknown view {d['view']!r}")
    return HeartAnnotation(bool(d["visible"]), d["view"], float(d["cx"]),
                           float(d["cy"]), float(d["r"]), float(d["theta"]))


def write_clip(clip_dir, frames_u8, annotations):
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    write_frames_bin(clip_dir / "frames.bin", frames_u8)
    with open(clip_dir / "annotations.json", "w") as f:
        json.dump([_ann_to_json(a) for a in annotations], f, indent=1)


def load_clip(clip_dir, subject_id, clip_id) -> ClipRecord:
    clip_dir = Path(clip_dir)
    frames = read_frames_bin(clip_dir / "frames.bin")
    ann_path = clip_dir / "annotations.json"
    try:
        records = json.loads(ann_path.read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{ann_path}: invalid JSON at line {e.lineno} col {e.colno}") from e
    if not isinstance(records, list):
        raise DataFormatError(f"{ann_path}: top level must be an array of records")
    if len(records) != frames.shape[0]:
        raise DataFormatError(f"{ann_path}: {len(records)} records for {frames.shape[0]} frames")
    anns = [_ann_from_json(d, ann_path, i) for i, d in enumerate(records)]
    return ClipRecord(subject_id, clip_id, frames, anns)


def load_dataset(root) -> List[ClipRecord]:
    """All clips under DIR/subject_*/clip_*/, sorted for determinism."""
    root = Path(root)
    if not root.is_dir():
        raise DataFormatError(f"{root}: dataset directory does not exist")
    clips = []
    for subj_dir in sorted(root.glob("subject_*")):
        sid = subj_dir.name.removeprefix("subject_")
        for clip_dir in sorted(subj_dir.glob("clip_*")):
            cid = clip_dir.name.removeprefix("clip_")
            clips.append(load_clip(clip_dir, sid, cid))
    if not clips:
        raise DataFormatError(f"{root}: no subject_*/clip_* directories found")
    return clips


def build_corpus(out_dir, n_subjects: int = 12, clips_per_subject: int = 8,
                 n_frames: int = 40, size: int = 96, seed: int = 0,
                 speckle=None) -> int:
    """Generate and write the phantom corpus; returns the clip count."""
    from .phantom import generate_clip, subject_params

    out_dir = Path(out_dir)
    count = 0
    for si in range(n_subjects):
        for ci in range(clips_per_subject):
            params = subject_params(seed, si, ci, speckle=speckle)
            frames, anns = generate_clip(params, n_frames, size)
            u8 = np.round(frames[:, 0] * 255.0).astype(np.uint8)
            write_clip(out_dir / f"subject_{params.subject_id}" / f"clip_c{ci:02d}",
                       u8, anns)
            count += 1
    return count


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model):
    manifest = []
    offset = 0
    blobs = []
    for name, p in model.params.items():
        blob = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps({"config": model.config.to_dict(), "manifest": manifest},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad magic at offset 0, expected {CHECKPOINT_MAGIC!r}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise DataFormatError(f"{path}: truncated header at offset 8 (need {hlen} bytes)")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        manifest = header["manifest"]
    except (ValueError, KeyError, TypeError) as e:
        raise DataFormatError(f"{path}: unreadable or incompatible header: {e}") from e

    model = Model(config, seed=0)
    if [m["name"] for m in manifest] != list(model.params.keys()):
        raise DataFormatError(f"{path}: tensor manifest does not match the declared config")
    payload = raw[8 + hlen:]
    for m in manifest:
        p = model.params[m["name"]]
        if tuple(m["shape"]) != p.data.shape:
            raise DataFormatError(f"{path}: tensor {m['name']!r} has shape {m['shape']}, "
                                  f"config requires {list(p.data.shape)}")
        count = int(np.prod(m["shape"], dtype=np.int64)) if m["shape"] else 1
        start = int(m["offset"])
        end = start + 4 * count
        if end > len(payload):
            raise DataFormatError(f"{path}: tensor {m['name']!r} payload at offset "
                                  f"{8 + hlen + start} runs past end of file")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        p.data = arr.reshape(tuple(m["shape"])).astype(config.np_dtype)
    return model


# ---------------------------------------------------------------------------
# reports / traces


def write_jsonl(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path):
    out = []
    with open(path) as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}: line {i + 1}: invalid JSON ({e.msg})") from e
    return out
