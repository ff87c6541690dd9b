"""Shared domain records and the evaluation metric suite.

Every series handled here is a 1-D float vector indexed by chunk ordinal.
Correlations on constant input are undefined; :func:`plcc` and :func:`srcc`
raise :class:`UndefinedCorrelation` and :func:`metric_report` turns that into
a flag instead of a silent zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_EMBED_DIM = 64


class UndefinedCorrelation(ValueError):
    """Raised when a correlation is requested on a constant series."""


@dataclass(frozen=True)
class ChunkRecord:
    index: int
    duration_s: float
    gt_saliency: float
    embedding: np.ndarray

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"chunk index must be >= 0, got {self.index}")
        if not self.duration_s > 0:
            raise ValueError(f"chunk {self.index}: duration must be > 0")
        if not 0.0 <= self.gt_saliency <= 1.0:
            raise ValueError(f"chunk {self.index}: gt_saliency {self.gt_saliency} outside [0, 1]")


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    title_info: str
    chunks: tuple[ChunkRecord, ...]
    text_embedding: np.ndarray

    def __post_init__(self):
        if not self.chunks:
            raise ValueError(f"video {self.video_id!r} has no chunks")
        object.__setattr__(self, "chunks", tuple(self.chunks))
        durations = {c.duration_s for c in self.chunks}
        if len(durations) != 1:
            raise ValueError(f"video {self.video_id!r}: chunk durations differ: {sorted(durations)}")
        dims = {len(c.embedding) for c in self.chunks}
        if len(dims) != 1 or len(self.text_embedding) not in dims:
            raise ValueError(f"video {self.video_id!r}: inconsistent embedding dimensions")
        for pos, c in enumerate(self.chunks):
            if c.index != pos:
                raise ValueError(f"video {self.video_id!r}: chunk at position {pos} has index {c.index}")

    def __len__(self):
        return len(self.chunks)

    @property
    def chunk_duration(self) -> float:
        return self.chunks[0].duration_s

    @property
    def embed_dim(self) -> int:
        return len(self.text_embedding)

    def gt(self) -> np.ndarray:
        return np.array([c.gt_saliency for c in self.chunks], dtype=float)

    def frame_embeddings(self) -> np.ndarray:
        return np.stack([np.asarray(c.embedding, dtype=float) for c in self.chunks])


def weight_series(values: Sequence[float]) -> np.ndarray:
    """Validate and return a chunk weight vector (finite, inside [0, 1])."""
    w = np.asarray(values, dtype=float)
    if w.ndim != 1:
        raise ValueError("weight series must be one-dimensional")
    if not np.all(np.isfinite(w)):
        raise ValueError("weight series contains non-finite entries")
    if w.size and (w.min() < 0.0 or w.max() > 1.0):
        raise ValueError(f"weight series outside [0, 1]: min={w.min()}, max={w.max()}")
    return w


@dataclass
class MetricReport:
    plcc: float
    srcc: float
    map50: float
    map15: float
    mae: float
    rmse: float
    correlation_defined: bool = True
    notes: list[str] = field(default_factory=list)

    def as_row(self) -> dict:
        return {
            "plcc": self.plcc,
            "srcc": self.srcc,
            "map50": self.map50,
            "map15": self.map15,
            "mae": self.mae,
            "rmse": self.rmse,
            "correlation_defined": int(self.correlation_defined),
        }


def _pair(x, y, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {x.size}")
    return x, y


def plcc(x, y) -> float:
    """Pearson linear correlation coefficient."""
    x, y = _pair(x, y, min_len=2)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("correlation undefined for a constant series")
    r = float(np.dot(xc, yc)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=float).ravel()
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=float)
    sorted_x = x[order]
    start = 0
    while start < x.size:
        stop = start + 1
        while stop < x.size and sorted_x[stop] == sorted_x[start]:
            stop += 1
        ranks[order[start:stop]] = (start + stop + 1) / 2.0
        start = stop
    return ranks


def srcc(x, y) -> float:
    """Spearman rank correlation (Pearson on average ranks)."""
    x, y = _pair(x, y, min_len=2)
    return plcc(average_ranks(x), average_ranks(y))


def _desc_order(values: np.ndarray) -> np.ndarray:
    # descending by value, lower index first on ties
    return np.lexsort((np.arange(values.size), -values))


def mean_ap(pred, gt, top_fraction: float) -> float:
    """Average precision of ``pred``'s ranking at retrieving the top fraction of ``gt``."""
    pred, gt = _pair(pred, gt, min_len=1)
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError(f"top_fraction must be in (0, 1], got {top_fraction}")
    n_pos = math.ceil(top_fraction * gt.size - 1e-12)
    n_pos = max(1, min(gt.size, n_pos))
    positives = np.zeros(gt.size, dtype=bool)
    positives[_desc_order(gt)[:n_pos]] = True
    hits = positives[_desc_order(pred)]
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, ranks.size + 1) / ranks
    return float(precision.mean())


def mae_rmse(pred, gt) -> tuple[float, float]:
    pred, gt = _pair(pred, gt, min_len=1)
    resid = pred - gt
    return float(np.mean(np.abs(resid))), float(math.sqrt(np.mean(resid * resid)))


def metric_report(pred, gt) -> MetricReport:
    """All point metrics for one predicted weight curve against its ground truth."""
    pred, gt = _pair(pred, gt, min_len=1)
    mae, rmse = mae_rmse(pred, gt)
    notes = []
    defined = True
    try:
        p = plcc(pred, gt)
        s = srcc(pred, gt)
    except (UndefinedCorrelation, ValueError) as exc:
        p = s = float("nan")
        defined = False
        notes.append(str(exc))
    return MetricReport(
        plcc=p,
        srcc=s,
        map50=mean_ap(pred, gt, 0.5),
        map15=mean_ap(pred, gt, 0.15),
        mae=mae,
        rmse=rmse,
        correlation_defined=defined,
        notes=notes,
    )


def macro_average(reports: Sequence[MetricReport]) -> dict:
    """Arithmetic mean over videos; undefined correlations are left out of the mean."""
    out = {}
    for key in ("plcc", "srcc", "map50", "map15", "mae", "rmse"):
        vals = [getattr(r, key) for r in reports if not math.isnan(getattr(r, key))]
        out[key] = float(np.mean(vals)) if vals else float("nan")
    out["videos"] = len(reports)
    out["undefined"] = sum(1 for r in reports if not r.correlation_defined)
    return out
