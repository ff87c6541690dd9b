"""Rating and sorting oracles.

Two implementations share one surface:

* :class:`MockOracle` derives ratings from ground-truth saliency with a seeded
  per-window affine distortion, so cross-window inconsistency can be dialled in
  and measured.
* :class:`HttpOracle` speaks a chat-completions style endpoint using the
  window-rating prompt below and parses the JSON reply.

Both count every invocation in a :class:`CallLedger`.
"""
from __future__ import annotations

import json
import os
import re
import threading
import time
import zlib
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

from .model import VideoRecord

RATING_MIN = 0
RATING_MAX = 100

RATING_PROMPT = (
    "You are shown {n_frames} consecutive frames from one video; each frame stands for one "
    "chunk and carries its frame number.\n"
    "Video title and category: {info}\n"
    "Story of the video up to these frames: {story_last}\n"
    "\n"
    "Do two things:\n"
    "- Write a short account of the story so far (at most 100 words) under the key "
    '"story_total", and a one-line note on these frames alone under "story_partial".\n'
    "- Give every one of the {n_frames} frames an integer score from 0 to 100, higher meaning "
    "more interesting to a viewer. Equal scores are allowed.\n"
    "\n"
    "Reply with JSON only, shaped as:\n"
    '[{{"story_partial": "..."}}, {{"story_total": "..."}}, '
    '[{{"frame": <number>, "rating": <score>}}, ...]]'
)

SORT_PROMPT = (
    "I have uploaded {n_frames} frames taken from one video, each labelled with its frame number.\n"
    "The overall summary of the whole video is: {summary}.\n"
    "Sort all {n_frames} frames from the most to the least interesting for a viewer of this video. "
    "Every frame must appear exactly once.\n"
    'Your answer must be a json object like this: {{"ranking": [frame, frame, ...]}}'
)


class OracleError(RuntimeError):
    """Transport failure or unusable oracle reply. Always safe to retry."""

    retriable = True

    def __init__(self, message: str, *, window_index: int | None = None):
        super().__init__(message)
        self.window_index = window_index


@dataclass(frozen=True)
class WindowRequest:
    frame_indices: tuple[int, ...]
    prev_summary: str
    video_info: str
    window_index: int = 0

    def __post_init__(self):
        idx = tuple(int(i) for i in self.frame_indices)
        object.__setattr__(self, "frame_indices", idx)
        if not idx:
            raise ValueError("window request needs at least one frame")
        if any(b - a != 1 for a, b in zip(idx, idx[1:])):
            raise ValueError(f"window frames must be contiguous and increasing: {idx}")


@dataclass(frozen=True)
class WindowResponse:
    ratings: tuple[int, ...]
    partial_summary: str
    total_summary: str
    latency_s: float

    def __post_init__(self):
        object.__setattr__(self, "ratings", tuple(int(r) for r in self.ratings))
        if any(r < RATING_MIN or r > RATING_MAX for r in self.ratings):
            raise ValueError(f"ratings outside [{RATING_MIN}, {RATING_MAX}]: {self.ratings}")
        if self.latency_s < 0:
            raise ValueError("latency must be non-negative")


@dataclass(frozen=True)
class SortRequest:
    candidate_indices: tuple[int, ...]
    global_summary: str

    def __post_init__(self):
        idx = tuple(int(i) for i in self.candidate_indices)
        object.__setattr__(self, "candidate_indices", idx)
        if not idx:
            raise ValueError("sort request needs at least one candidate")
        if len(set(idx)) != len(idx):
            raise ValueError(f"duplicate candidates in sort request: {idx}")


@dataclass
class MockOracleConfig:
    window_bias_amplitude: float = 0.0
    rating_noise_std: float = 0.0
    comparator_swap_prob: float = 0.0
    latency_mean_s: float = 9.83
    latency_std_s: float = 0.83
    rng_seed: int = 0

    def __post_init__(self):
        if self.window_bias_amplitude < 0:
            raise ValueError("window_bias_amplitude must be >= 0")
        if self.rating_noise_std < 0:
            raise ValueError("rating_noise_std must be >= 0")
        if not 0.0 <= self.comparator_swap_prob < 0.5:
            raise ValueError("comparator_swap_prob must be in [0, 0.5)")
        if self.latency_mean_s < 0:
            raise ValueError("latency_mean_s must be >= 0")
        if self.latency_std_s < 0:
            raise ValueError("latency_std_s must be >= 0")


@dataclass
class TokenCosts:
    per_frame: int = 85
    prompt_overhead: int = 250


@dataclass
class CallLedger:
    rate_calls: int = 0
    sort_calls: int = 0
    frames_rated: int = 0
    frames_sorted: int = 0
    costs: TokenCosts = field(default_factory=TokenCosts)

    @property
    def total_tokens_estimate(self) -> int:
        calls = self.rate_calls + self.sort_calls
        frames = self.frames_rated + self.frames_sorted
        return self.costs.per_frame * frames + self.costs.prompt_overhead * calls

    def as_tuple(self) -> tuple[int, int, int]:
        return self.rate_calls, self.sort_calls, self.total_tokens_estimate


class Oracle:
    """Common bookkeeping: serialized invocation counter and call ledger."""

    def __init__(self, video: VideoRecord, token_costs: TokenCosts | None = None):
        self.video = video
        self.ledger = CallLedger(costs=token_costs or TokenCosts())
        self._lock = threading.Lock()

    def _check_frames(self, indices: Sequence[int]):
        n = len(self.video)
        bad = [i for i in indices if not 0 <= i < n]
        if bad:
            raise ValueError(f"frame indices {bad} outside video of {n} chunks")

    def rate_window(self, req: WindowRequest) -> WindowResponse:
        self._check_frames(req.frame_indices)
        with self._lock:
            ordinal = self.ledger.rate_calls
            self.ledger.rate_calls += 1
            self.ledger.frames_rated += len(req.frame_indices)
            resp = self._rate(req, ordinal)
        if len(resp.ratings) != len(req.frame_indices):
            raise OracleError(
                f"oracle returned {len(resp.ratings)} ratings for {len(req.frame_indices)} frames",
                window_index=req.window_index,
            )
        return resp

    def sort_window(self, req: SortRequest) -> list[int]:
        self._check_frames(req.candidate_indices)
        with self._lock:
            ordinal = self.ledger.sort_calls
            self.ledger.sort_calls += 1
            self.ledger.frames_sorted += len(req.candidate_indices)
            order = [int(i) for i in self._sort(req, ordinal)]
        if sorted(order) != sorted(req.candidate_indices):
            raise OracleError(f"sort reply {order} is not a permutation of {list(req.candidate_indices)}")
        return order

    def call_ledger(self) -> tuple[int, int, int]:
        return self.ledger.as_tuple()

    def _rate(self, req: WindowRequest, ordinal: int) -> WindowResponse:
        raise NotImplementedError

    def _sort(self, req: SortRequest, ordinal: int) -> list[int]:
        raise NotImplementedError


_RATE_STREAM = 1
_LATENCY_STREAM = 2
_SORT_STREAM = 3


def video_key(video_id: str) -> int:
    return zlib.crc32(video_id.encode("utf-8"))


def gt_order(indices: Sequence[int], gt: np.ndarray) -> list[int]:
    """Indices sorted by ground truth, highest first, lower ordinal on ties."""
    return sorted(indices, key=lambda i: (-gt[i], i))


class MockOracle(Oracle):
    """Ground-truth driven stand-in for the LLM.

    Window ``k`` is rated as ``clamp(round(100 * (a_k * gt + b_k) + eps), 0, 100)``
    with ``a_k ~ U[1-A, 1+A]`` and ``b_k ~ U[-A, A]``. The draw depends only on
    the seed, the video id and ``k``, so the same request always gets the same
    answer. Sorting returns the ground-truth order followed by one pass of
    seeded adjacent swaps.
    """

    def __init__(self, video: VideoRecord, cfg: MockOracleConfig, token_costs: TokenCosts | None = None):
        super().__init__(video, token_costs)
        self.cfg = cfg
        self._gt = video.gt()
        self._vkey = video_key(video.video_id)

    def _rng(self, stream: int, k: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.rng_seed & 0xFFFFFFFFFFFFFFFF, self._vkey, stream, k])

    def window_distortion(self, k: int) -> tuple[float, float]:
        amp = self.cfg.window_bias_amplitude
        rng = self._rng(_RATE_STREAM, k)
        a = rng.uniform(1.0 - amp, 1.0 + amp)
        b = rng.uniform(-amp, amp)
        return float(a), float(b)

    def sample_latency(self, k: int) -> float:
        rng = self._rng(_LATENCY_STREAM, k)
        return max(0.0, float(rng.normal(self.cfg.latency_mean_s, self.cfg.latency_std_s)))

    def _rate(self, req: WindowRequest, ordinal: int) -> WindowResponse:
        k = req.window_index
        a, b = self.window_distortion(k)
        rng = self._rng(_RATE_STREAM, k)
        rng.uniform(size=2)  # skip the (a, b) draws
        gt = self._gt[list(req.frame_indices)]
        noise = rng.normal(0.0, self.cfg.rating_noise_std, size=gt.size) if self.cfg.rating_noise_std else 0.0
        raw = np.floor(100.0 * (a * gt + b) + noise + 0.5)
        ratings = np.clip(raw, RATING_MIN, RATING_MAX).astype(int)
        first, last = req.frame_indices[0], req.frame_indices[-1]
        peak = req.frame_indices[int(np.argmax(ratings))]
        return WindowResponse(
            ratings=tuple(ratings.tolist()),
            partial_summary=f"window {k}: frames {first}-{last}, most interesting frame {peak}",
            total_summary=f"{self.video.video_id}: story through window {k} (frames 0-{last})",
            latency_s=self.sample_latency(k),
        )

    def _sort(self, req: SortRequest, ordinal: int) -> list[int]:
        order = gt_order(req.candidate_indices, self._gt)
        p = self.cfg.comparator_swap_prob
        if p > 0 and len(order) > 1:
            draws = self._rng(_SORT_STREAM, ordinal).random(len(order) - 1)
            for i, u in enumerate(draws):
                if u < p:
                    order[i], order[i + 1] = order[i + 1], order[i]
        return order


# --- HTTP mode -----------------------------------------------------------------

_FENCE = re.compile(r"```(?:json)?", re.IGNORECASE)


def _load_json_loose(text: str):
    """Pull the first JSON value out of a model reply (fences, stray 'json' tags, paren-objects)."""
    body = _FENCE.sub("", text).strip()
    starts = [i for i in (body.find("["), body.find("{")) if i >= 0]
    if not starts:
        raise OracleError("reply contains no JSON value")
    body = body[min(starts):]
    attempts = [body, re.sub(r"\bjson\b", "", body)]
    attempts.append(attempts[-1].replace("(", "{").replace(")", "}"))
    decoder = json.JSONDecoder()
    for candidate in attempts:
        try:
            value, _ = decoder.raw_decode(candidate.strip())
            return value
        except json.JSONDecodeError:
            continue
    raise OracleError("reply is not valid JSON")


def _walk(value):
    yield value
    if isinstance(value, dict):
        for v in value.values():
            yield from _walk(v)
    elif isinstance(value, list):
        for v in value:
            yield from _walk(v)


def parse_rating_reply(text: str, frame_indices: Sequence[int]) -> tuple[list[int], str, str]:
    """Map a rating reply onto ``frame_indices``. Raises :class:`OracleError` on any gap."""
    value = _load_json_loose(text)
    partial = total = None
    by_frame: dict[int, int] = {}
    for node in _walk(value):
        if not isinstance(node, dict):
            continue
        if "story_partial" in node:
            partial = str(node["story_partial"])
        if "story_total" in node:
            total = str(node["story_total"])
        if "frame" in node and "rating" in node:
            try:
                frame = int(node["frame"])
                rating = float(node["rating"])
            except (TypeError, ValueError) as exc:
                raise OracleError(f"unparseable frame rating {node!r}") from exc
            if rating != int(rating) or not RATING_MIN <= rating <= RATING_MAX:
                raise OracleError(f"rating {node['rating']!r} for frame {frame} is not an integer in [0, 100]")
            by_frame[frame] = int(rating)
    if total is None:
        raise OracleError("reply has no story_total")
    missing = [i for i in frame_indices if i not in by_frame]
    if missing:
        raise OracleError(f"reply is missing ratings for frames {missing}")
    return [by_frame[i] for i in frame_indices], partial or "", total


def parse_sort_reply(text: str) -> list[int]:
    value = _load_json_loose(text)
    if isinstance(value, dict):
        value = value.get("ranking")
    if not isinstance(value, list):
        raise OracleError("sort reply has no ranking list")
    try:
        return [int(v["frame"]) if isinstance(v, dict) else int(v) for v in value]
    except (TypeError, ValueError, KeyError) as exc:
        raise OracleError(f"sort reply entries are not frame numbers: {value!r}") from exc


def build_rating_prompt(req: WindowRequest) -> str:
    prompt = RATING_PROMPT.format(
        n_frames=len(req.frame_indices), info=req.video_info, story_last=req.prev_summary
    )
    return prompt + "\n\nFrame numbers: " + ", ".join(str(i) for i in req.frame_indices)


def build_sort_prompt(req: SortRequest) -> str:
    prompt = SORT_PROMPT.format(n_frames=len(req.candidate_indices), summary=req.global_summary)
    return prompt + "\n\nFrame numbers: " + ", ".join(str(i) for i in req.candidate_indices)


@dataclass
class HttpOracleConfig:
    endpoint: str
    model: str = "gpt-4o"
    api_key_env: str = "OPENAI_API_KEY"
    timeout_s: float = 120.0


class HttpOracle(Oracle):
    """Chat-completions client. The API key is read from the named environment variable."""

    def __init__(
        self,
        video: VideoRecord,
        cfg: HttpOracleConfig,
        token_costs: TokenCosts | None = None,
        post: Callable | None = None,
    ):
        super().__init__(video, token_costs)
        self.cfg = cfg
        if post is None:
            import requests

            post = requests.Session().post
        self._post = post

    def _complete(self, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.cfg.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {"model": self.cfg.model, "messages": [{"role": "user", "content": prompt}]}
        try:
            resp = self._post(self.cfg.endpoint, json=body, headers=headers, timeout=self.cfg.timeout_s)
            resp.raise_for_status()
            payload = resp.json()
            return payload["choices"][0]["message"]["content"]
        except OracleError:
            raise
        except Exception as exc:  # transport, HTTP status, or envelope shape
            raise OracleError(f"oracle request failed: {exc}") from exc

    def _rate(self, req: WindowRequest, ordinal: int) -> WindowResponse:
        t0 = time.perf_counter()
        text = self._complete(build_rating_prompt(req))
        latency = time.perf_counter() - t0
        try:
            ratings, partial, total = parse_rating_reply(text, req.frame_indices)
        except OracleError as exc:
            exc.window_index = req.window_index
            raise
        return WindowResponse(tuple(ratings), partial, total, latency)

    def _sort(self, req: SortRequest, ordinal: int) -> list[int]:
        return parse_sort_reply(self._complete(build_sort_prompt(req)))


def response_to_dict(resp: WindowResponse) -> dict:
    d = asdict(resp)
    d["ratings"] = list(resp.ratings)
    return d


def kendall_tau_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Number of discordant pairs between two orderings of the same items."""
    pos = {item: i for i, item in enumerate(b)}
    seq = [pos[item] for item in a]
    return sum(1 for i in range(len(seq)) for j in range(i + 1, len(seq)) if seq[i] > seq[j])

