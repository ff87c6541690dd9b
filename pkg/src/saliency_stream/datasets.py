"""Per-chunk dataset CSV reading/writing and the seeded train/val/test split.

CSV columns: ``video_id, chunk_index, gt_saliency`` followed by optional
``duration_s``, ``title`` and ``emb_0 .. emb_{E-1}``. Videos without embedding
columns get seeded synthetic embeddings.
"""
from __future__ import annotations

import csv
import math
import zlib
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import DEFAULT_EMBED_DIM, VideoRecord
from .synth import make_video

REQUIRED = ("video_id", "chunk_index", "gt_saliency")


class DatasetError(ValueError):
    pass


def load_dataset(path: str | Path, seed: int = 0, embed_dim: int = DEFAULT_EMBED_DIM) -> list[VideoRecord]:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [(n, line) for n, line in enumerate(fh, 1) if line.strip() and not line.startswith("#")]
    if not rows:
        raise DatasetError(f"{path}: empty dataset")
    reader = csv.reader([line for _, line in rows])
    header = [h.strip() for h in next(reader)]
    missing = [c for c in REQUIRED if c not in header]
    if missing:
        raise DatasetError(f"{path}:{rows[0][0]}: missing columns {missing}")
    emb_cols = sorted((c for c in header if c.startswith("emb_")), key=lambda c: int(c[4:]))
    if emb_cols and [int(c[4:]) for c in emb_cols] != list(range(len(emb_cols))):
        raise DatasetError(f"{path}:{rows[0][0]}: embedding columns must be emb_0..emb_{{E-1}}")
    col = {c: i for i, c in enumerate(header)}

    per_video: dict[str, list] = defaultdict(list)
    for (lineno, _), values in zip(rows[1:], reader):
        if len(values) != len(header):
            raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(values)}")
        try:
            vid = values[col["video_id"]].strip()
            idx = int(values[col["chunk_index"]])
            gt = float(values[col["gt_saliency"]])
            dur = float(values[col["duration_s"]]) if "duration_s" in col else 1.0
            emb = [float(values[col[c]]) for c in emb_cols]
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        if not vid:
            raise DatasetError(f"{path}:{lineno}: empty video_id")
        if not (0.0 <= gt <= 1.0):
            raise DatasetError(f"{path}:{lineno}: gt_saliency {gt} outside [0, 1]")
        if not all(math.isfinite(e) for e in emb):
            raise DatasetError(f"{path}:{lineno}: non-finite embedding value")
        title = values[col["title"]] if "title" in col else None
        per_video[vid].append((idx, gt, dur, emb, title, lineno))

    videos = []
    for vid, recs in per_video.items():
        recs.sort(key=lambda r: r[0])
        for want, r in enumerate(recs):
            if r[0] != want:
                raise DatasetError(f"{path}:{r[5]}: video {vid} chunk indices must run 0..D-1 (expected {want}, got {r[0]})")
        gt = np.array([r[1] for r in recs])
        title = next((r[4] for r in recs if r[4]), None)
        rng = np.random.default_rng([seed, zlib.crc32(vid.encode())])
        frames = np.array([r[3] for r in recs]) if emb_cols else None
        text = frames.mean(axis=0) if frames is not None else None
        try:
            videos.append(make_video(vid, gt, rng, embed_dim, recs[0][2], title, frames, text))
        except ValueError as exc:
            raise DatasetError(f"{path}: video {vid}: {exc}") from None
    return videos


def save_dataset(path: str | Path, videos: Sequence[VideoRecord], embeddings: bool = True):
    """Write videos in the CSV schema that :func:`load_dataset` reads."""
    E = videos[0].embed_dim if videos else 0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video_id", "chunk_index", "gt_saliency", "duration_s", "title"]
                   + ([f"emb_{k}" for k in range(E)] if embeddings else []))
        for v in videos:
            for c in v.chunks:
                row = [v.video_id, c.index, repr(c.gt_saliency), repr(c.duration_s), v.title_info]
                if embeddings:
                    row += [repr(float(x)) for x in c.embedding]
                w.writerow(row)


def split_videos(videos: Sequence[VideoRecord], seed: int, ratios=(0.7, 0.15, 0.15)):
    """Seeded shuffle into train/val/test with the given ratios (train keeps the rounding remainder)."""
    order = np.random.default_rng(seed).permutation(len(videos))
    n = len(videos)
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    if n - n_val - n_test < 1:
        n_val, n_test = 0, 0 if n == 1 else min(n_test, n - 1)
    picked = [videos[i] for i in order]
    train = picked[: n - n_val - n_test]
    val = picked[n - n_val - n_test : n - n_test]
    test = picked[n - n_test :]
    return train, val, test
