"""Oracle-guided merge sort over per-window sorted groups.

Each window from the perception pass becomes a group sorted by its own
ratings. Groups are merged pairwise by binary recursion; a merge step shows
the oracle the heads of both groups (up to ``m`` frames), keeps the leading
half of the returned order and pushes the rest back onto the group each frame
came from. When both groups together fit in one window the whole returned
order is kept.

Every oracle reply is recorded, so a run that fails part-way can be resumed by
replaying the recorded replies (see :class:`SortReplay`).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import weight_series
from .perception import PerceptionResult
from .rater import Oracle, OracleError, SortRequest


@dataclass
class RankingResult:
    global_order: list[int]
    normalized_weights: np.ndarray
    smoothed_weights: np.ndarray
    sort_calls_used: int


class RankingError(OracleError):
    """Oracle failure during merging; ``snapshot`` holds the state needed to resume."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class SortReplay:
    """Wraps an oracle's ``sort_window``, recording replies and replaying earlier ones.

    Replayed replies are only used while the requests match the recorded ones,
    which they do because merging is deterministic given the replies.
    """

    def __init__(self, oracle: Oracle, recorded: Sequence[dict] = ()):
        self.oracle = oracle
        self.recorded = [dict(r) for r in recorded]
        self.calls: list[dict] = []
        self.fresh_calls = 0

    def __call__(self, req: SortRequest) -> list[int]:
        pos = len(self.calls)
        if pos < len(self.recorded) and tuple(self.recorded[pos]["candidates"]) == req.candidate_indices:
            order = list(self.recorded[pos]["order"])
        else:
            order = self.oracle.sort_window(req)
            self.fresh_calls += 1
        self.calls.append({"candidates": list(req.candidate_indices), "order": list(order)})
        return order


def seed_groups(p: PerceptionResult) -> list[list[int]]:
    """One group per window, ordered by rating (desc), lower chunk index first on ties."""
    groups = []
    for frames in p.windows():
        groups.append(sorted(frames, key=lambda i: (-int(p.raw_ratings[i]), i)))
    return groups


def _shares(m: int) -> tuple[int, int]:
    if m < 2:
        raise ValueError(f"merging needs a window of at least 2 frames, got m={m}")
    return math.ceil(m / 2), m // 2


def merge_two(a: Sequence[int], b: Sequence[int], summary: str, m: int, sorter, state: dict | None = None) -> list[int]:
    """Merge two sorted groups using ``sorter`` (a ``SortRequest -> order`` callable)."""
    share_a, share_b = _shares(m)
    a, b = list(a), list(b)
    source = {i: 0 for i in a}
    source.update({i: 1 for i in b})
    out: list[int] = []
    while a and b:
        if state is not None:
            state["merge"] = {"a": list(a), "b": list(b), "committed": list(out)}
        if len(a) + len(b) <= m:
            out.extend(sorter(SortRequest(tuple(a + b), summary)))
            a, b = [], []
            break
        head_a, head_b = a[:share_a], b[:share_b]
        window = head_a + head_b
        order = sorter(SortRequest(tuple(window), summary))
        commit = share_b if len(window) == m else math.ceil(len(window) / 2)
        out.extend(order[:commit])
        back_a = [i for i in order[commit:] if source[i] == 0]
        back_b = [i for i in order[commit:] if source[i] == 1]
        a = back_a + a[len(head_a):]
        b = back_b + b[len(head_b):]
    out.extend(a)
    out.extend(b)
    return out


def global_sort(groups: Sequence[Sequence[int]], summary: str, m: int, sorter, state: dict | None = None) -> list[int]:
    """Binary-recursive merge of all groups; the left half takes ``ceil(k/2)`` groups."""
    if not groups:
        return []
    if len(groups) == 1:
        return list(groups[0])
    mid = math.ceil(len(groups) / 2)
    left = global_sort(groups[:mid], summary, m, sorter, state)
    right = global_sort(groups[mid:], summary, m, sorter, state)
    return merge_two(left, right, summary, m, sorter, state)


def recurrence_T(k: int) -> int:
    """Worst-case oracle calls to sort ``k`` groups: T(1)=1, T(k)=T(floor k/2)+T(ceil k/2)+2k-1."""
    if k < 1:
        raise ValueError(f"group count must be >= 1, got {k}")
    return _T(k)


@lru_cache(maxsize=None)
def _T(k: int) -> int:
    if k == 1:
        return 1
    return _T(k // 2) + _T(k - k // 2) + 2 * k - 1


def gaussian_kernel(sigma: float, kernel_size: int) -> np.ndarray:
    """Unit-mass Gaussian taps at offsets ``-r..r`` with ``r = (kernel_size - 1) // 2``."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    if kernel_size < 1:
        raise ValueError("kernel_size must be >= 1")
    r = (kernel_size - 1) // 2
    offsets = np.arange(-r, r + 1, dtype=float)
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    return taps / taps.sum()


def gaussian_smooth(w, sigma: float = 5.0, kernel_size: int | None = None) -> np.ndarray:
    """Gaussian smoothing; near the ends the kernel is renormalised over in-range taps."""
    w = np.asarray(w, dtype=float)
    if kernel_size is None:
        kernel_size = w.size
    taps = gaussian_kernel(sigma, kernel_size)
    num = _centered_convolve(w, taps)
    den = _centered_convolve(np.ones_like(w), taps)
    return np.clip(num / den, 0.0, 1.0)


def _centered_convolve(w: np.ndarray, taps: np.ndarray) -> np.ndarray:
    r = taps.size // 2
    return np.convolve(w, taps, mode="full")[r : r + w.size]


def rank_to_weights(order: Sequence[int], n_chunks: int) -> np.ndarray:
    order = list(order)
    if sorted(order) != list(range(n_chunks)):
        raise ValueError("order is not a permutation of the chunk ordinals")
    w = np.empty(n_chunks, dtype=float)
    if n_chunks == 1:
        w[:] = 1.0
        return w
    for pos, chunk in enumerate(order):
        w[chunk] = (n_chunks - 1 - pos) / (n_chunks - 1)
    return weight_series(w)


def rank_video(
    p: PerceptionResult,
    oracle: Oracle,
    sigma: float = 5.0,
    kernel_size: int | None = None,
    replay: Sequence[dict] = (),
) -> RankingResult:
    """Full ranking stage: seed groups, merge, normalise ranks, smooth."""
    n = len(p.raw_ratings)
    groups = seed_groups(p)
    sorter = SortReplay(oracle, replay)
    state: dict = {}
    try:
        order = global_sort(groups, p.global_summary, p.window_length, sorter, state)
    except OracleError as exc:
        snap = {
            "window_length": p.window_length,
            "groups": groups,
            "calls": sorter.calls,
            "pending": state.get("merge"),
        }
        raise RankingError(f"ranking interrupted after {len(sorter.calls)} sort calls: {exc}", snap) from exc
    if sorted(order) != list(range(n)):
        raise AssertionError("merge produced something other than a permutation")
    norm = rank_to_weights(order, n)
    smooth = gaussian_smooth(norm, sigma, kernel_size if kernel_size is not None else n)
    return RankingResult(order, norm, smooth, len(sorter.calls))


def save_snapshot(path: str | Path, snapshot: dict):
    Path(path).write_text(json.dumps(snapshot, indent=1, sort_keys=True))


def load_snapshot(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
