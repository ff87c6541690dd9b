"""Sliding-window rating pass over a video.

Window ``k`` (0-based) covers chunks ``k*m .. min((k+1)*m, D) - 1``. The
summary returned for window ``k`` is handed to window ``k+1``; the first window
starts from the video's title text. Responses can be cached to a JSON-lines
file so an interrupted pass resumes without re-asking the oracle.
"""
from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .model import VideoRecord, weight_series
from .rater import Oracle, OracleError, WindowRequest, WindowResponse


class AnchorFrame(str, Enum):
    FIRST = "first"
    MIDDLE = "middle"
    LAST = "last"


@dataclass
class PerceptionResult:
    raw_ratings: np.ndarray
    summaries: list[str]
    window_length: int
    responses: list[WindowResponse]
    requests: list[WindowRequest]

    @property
    def global_summary(self) -> str:
        return self.summaries[-1]

    def windows(self) -> list[tuple[int, ...]]:
        return [r.frame_indices for r in self.requests]


def window_bounds(n_chunks: int, m: int) -> list[range]:
    if m < 1:
        raise ValueError(f"window length must be >= 1, got {m}")
    if n_chunks < 1:
        raise ValueError("video must contain at least one chunk")
    return [range(start, min(start + m, n_chunks)) for start in range(0, n_chunks, m)]


class ResponseCache:
    """JSON-lines store of window responses keyed by (video_id, window_index)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._records: dict[tuple[str, int], dict] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            with self.path.open() as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                        key = (str(rec["video_id"]), int(rec["window_index"]))
                    except (json.JSONDecodeError, KeyError, ValueError) as exc:
                        raise ValueError(f"{self.path}:{lineno}: bad cache record") from exc
                    self._records[key] = rec

    def get(self, video_id: str, req: WindowRequest) -> WindowResponse | None:
        rec = self._records.get((video_id, req.window_index))
        if rec is None or tuple(rec["frame_indices"]) != req.frame_indices:
            return None
        return WindowResponse(
            ratings=tuple(rec["ratings"]),
            partial_summary=rec["partial_summary"],
            total_summary=rec["total_summary"],
            latency_s=float(rec["latency_s"]),
        )

    def put(self, video_id: str, req: WindowRequest, resp: WindowResponse):
        rec = {
            "video_id": video_id,
            "window_index": req.window_index,
            "frame_indices": list(req.frame_indices),
            "ratings": list(resp.ratings),
            "partial_summary": resp.partial_summary,
            "total_summary": resp.total_summary,
            "latency_s": resp.latency_s,
        }
        with self._lock:
            self._records[(video_id, req.window_index)] = rec
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def __len__(self):
        return len(self._records)


def run_perception(
    video: VideoRecord,
    m: int,
    oracle: Oracle,
    cache: ResponseCache | None = None,
) -> PerceptionResult:
    summary = video.title_info
    ratings: list[int] = []
    summaries: list[str] = []
    responses: list[WindowResponse] = []
    requests: list[WindowRequest] = []
    for k, span in enumerate(window_bounds(len(video), m)):
        req = WindowRequest(tuple(span), summary, video.title_info, window_index=k)
        resp = cache.get(video.video_id, req) if cache is not None else None
        if resp is None:
            try:
                resp = oracle.rate_window(req)
            except OracleError as exc:
                exc.window_index = k
                raise
            if cache is not None:
                cache.put(video.video_id, req, resp)
        if len(resp.ratings) != len(span):
            raise OracleError(f"window {k}: {len(resp.ratings)} ratings for {len(span)} frames", window_index=k)
        ratings.extend(resp.ratings)
        summaries.append(resp.total_summary)
        responses.append(resp)
        requests.append(req)
        summary = resp.total_summary
    assert len(summaries) == math.ceil(len(video) / m)
    return PerceptionResult(np.array(ratings, dtype=int), summaries, m, responses, requests)


def raw_weights(p: PerceptionResult) -> np.ndarray:
    return weight_series(np.asarray(p.raw_ratings, dtype=float) / 100.0)
