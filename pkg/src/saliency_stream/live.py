"""Live-streaming weight scheduler on a discrete-event clock.

Chunk ``i`` becomes current at ``t = i * d``. Every ``m`` chunks the previous
window is submitted to the rater; when its reply lands, a forecaster sized by
:func:`required_lout` is launched; when that finishes its outputs are written
into the :class:`WeightPool` at absolute chunk ordinals. After every chunk
boundary the ABR asks for the next ``N`` weights and gets pool values where
present and 1.0 elsewhere. Queries only read the pool, they never wait.

Events at one timestamp are ordered: chunk boundary, rater reply, forecast
completion, weight query. So a zero-latency reply is visible to the query of
the same boundary.
"""
from __future__ import annotations

import heapq
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol, Sequence

import numpy as np

from .forecast import ForecastInput, _Forecaster
from .model import VideoRecord, plcc, UndefinedCorrelation
from .rater import Oracle, OracleError, WindowRequest, video_key

DEFAULT_WEIGHT = 1.0

CHUNK_PLAYED = "ChunkPlayed"
RATER_SUBMITTED = "RaterSubmitted"
RATER_RESPONDED = "RaterResponded"
RATER_FAILED = "RaterFailed"
FORECAST_SUBMITTED = "ForecastSubmitted"
FORECAST_COMPLETED = "ForecastCompleted"
WEIGHTS_QUERIED = "WeightsQueried"

_PRIORITY = {CHUNK_PLAYED: 0, RATER_RESPONDED: 1, RATER_FAILED: 1, FORECAST_COMPLETED: 2, WEIGHTS_QUERIED: 3}


@dataclass
class LiveConfig:
    d: float = 1.0
    m: int = 10
    N: int = 5
    pretrained_outputs: list[int] | None = None
    forecast_latency_est_s: float = 1.35
    forecast_latency_mean_s: float | None = None
    forecast_latency_std_s: float = 0.0
    ewma_alpha: float = 0.3
    rng_seed: int = 0

    def __post_init__(self):
        if not self.d > 0:
            raise ValueError("chunk duration d must be > 0")
        if self.m < 1 or self.N < 1:
            raise ValueError("m and N must be >= 1")
        if self.pretrained_outputs is None:
            self.pretrained_outputs = [self.m, 2 * self.m, 3 * self.m]
        outs = [int(v) for v in self.pretrained_outputs]
        if not outs or any(v < 1 for v in outs) or outs != sorted(set(outs)):
            raise ValueError(f"pretrained_outputs must be non-empty, positive and strictly ascending: {outs}")
        self.pretrained_outputs = outs
        if self.forecast_latency_est_s < 0 or self.forecast_latency_std_s < 0:
            raise ValueError("forecast latencies must be >= 0")
        if self.forecast_latency_mean_s is None:
            self.forecast_latency_mean_s = self.forecast_latency_est_s
        if not 0 < self.ewma_alpha <= 1:
            raise ValueError("ewma_alpha must be in (0, 1]")


def required_lout(delta_t: float, delta: float, d: float, m: int, N: int) -> int:
    """Forecast length covering the response gap, the next rating period and the ABR horizon."""
    if delta_t < 0 or delta < 0 or not d > 0:
        raise ValueError("latencies must be >= 0 and d > 0")
    gap = (delta_t + delta) / d
    return math.ceil(gap - 1e-9) + m + N


class ShortfallWarning(UserWarning):
    """No pretrained forecaster is long enough; the tail is padded with the default weight."""


class ModelChoice(NamedTuple):
    l_out: int
    shortfall: int


def select_model(required: int, available: Sequence[int]) -> ModelChoice:
    """Smallest available output length >= required; else the largest, with the shortfall."""
    if not available:
        raise ValueError("no pretrained output lengths available")
    for l_out in sorted(available):
        if l_out >= required:
            return ModelChoice(l_out, 0)
    largest = max(available)
    warnings.warn(f"no model covers L_out={required}; using {largest} and padding "
                  f"{required - largest} chunks with {DEFAULT_WEIGHT}", ShortfallWarning, stacklevel=2)
    return ModelChoice(largest, required - largest)


class Forecaster(Protocol):
    def __call__(self, inp: ForecastInput, l_out: int) -> np.ndarray: ...


class ModelBank:
    """Trained forecasters keyed by output length."""

    def __init__(self, models: dict[int, _Forecaster]):
        self.models = dict(models)

    def missing(self, wanted: Sequence[int]) -> list[int]:
        return [l for l in wanted if l not in self.models]

    def __call__(self, inp: ForecastInput, l_out: int) -> np.ndarray:
        return self.models[l_out].predict_one(inp)


class PersistenceForecaster:
    """Repeats the last rated weight. Used as a stand-in when no trained model is wanted."""

    def __call__(self, inp: ForecastInput, l_out: int) -> np.ndarray:
        return np.full(l_out, float(inp.series[-1]))


@dataclass
class PoolEntry:
    weight: float
    submitted_at: float
    window: int
    padded: bool = False


class WeightPool:
    """Chunk ordinal -> latest forecast weight. Writes keep the newest submission."""

    def __init__(self):
        self._entries: dict[int, PoolEntry] = {}

    def write(self, start_chunk: int, values: Sequence[float], submitted_at: float, window: int, n_real: int):
        for offset, w in enumerate(values):
            chunk = start_chunk + offset
            new = PoolEntry(float(min(1.0, max(0.0, w))), submitted_at, window, padded=offset >= n_real)
            old = self._entries.get(chunk)
            if old is None or (new.submitted_at, new.window) >= (old.submitted_at, old.window):
                self._entries[chunk] = new

    def lookup(self, chunk: int) -> PoolEntry | None:
        return self._entries.get(chunk)

    def query(self, chunks: Sequence[int]) -> tuple[list[float], list[bool]]:
        weights, served = [], []
        for c in chunks:
            e = self._entries.get(c)
            if e is None or e.padded:
                weights.append(DEFAULT_WEIGHT)
                served.append(False)
            else:
                weights.append(e.weight)
                served.append(True)
        return weights, served

    def __len__(self):
        return len(self._entries)


@dataclass
class SessionTimeline:
    events: list[dict] = field(default_factory=list)
    n_chunks: int = 0
    N: int = 0

    def append(self, t: float, kind: str, **fields):
        if self.events and t < self.events[-1]["t"]:
            raise AssertionError(f"event {kind} at {t} precedes {self.events[-1]['t']}")
        self.events.append({"t": t, "event": kind, **fields})

    def of(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["event"] == kind]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    def save(self, path: str | Path):
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path: str | Path) -> "SessionTimeline":
        events = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        tl = cls(events=events)
        played = [e["chunk"] for e in events if e["event"] == CHUNK_PLAYED]
        tl.n_chunks = max(played) + 1 if played else 0
        return tl


class LiveSession:
    """Runs the scheduler over one video against a rater and an optional forecaster."""

    def __init__(self, video: VideoRecord, rater: Oracle, forecaster: Forecaster | None, cfg: LiveConfig):
        self.video = video
        self.rater = rater
        self.forecaster = forecaster
        self.cfg = cfg
        self.pool = WeightPool()
        self.timeline = SessionTimeline(n_chunks=len(video), N=cfg.N)
        self.delta_est = cfg.forecast_latency_est_s
        self.shortfalls: list[int] = []
        self._queue: list = []
        self._seq = 0
        self._frames = video.frame_embeddings()
        self._summary = video.title_info
        self._vkey = video_key(video.video_id)

    def _push(self, t: float, kind: str, payload: dict):
        heapq.heappush(self._queue, (t, _PRIORITY[kind], self._seq, kind, payload))
        self._seq += 1

    def _forecast_latency(self, window: int) -> float:
        cfg = self.cfg
        if cfg.forecast_latency_std_s == 0:
            return float(cfg.forecast_latency_mean_s)
        rng = np.random.default_rng([cfg.rng_seed, self._vkey, 7, window])
        return max(0.0, float(rng.normal(cfg.forecast_latency_mean_s, cfg.forecast_latency_std_s)))

    def run(self) -> SessionTimeline:
        cfg = self.cfg
        for i in range(len(self.video)):
            self._push(i * cfg.d, CHUNK_PLAYED, {"chunk": i})
        while self._queue:
            t, _, _, kind, payload = heapq.heappop(self._queue)
            getattr(self, "_on_" + kind)(t, **payload)
        return self.timeline

    def _on_ChunkPlayed(self, t: float, chunk: int):
        cfg = self.cfg
        self.timeline.append(t, CHUNK_PLAYED, chunk=chunk)
        if chunk % cfg.m == 0 and chunk >= cfg.m:
            window = chunk // cfg.m - 1
            frames = list(range(chunk - cfg.m, chunk))
            self.timeline.append(t, RATER_SUBMITTED, window=window, frames=frames)
            req = WindowRequest(tuple(frames), self._summary, self.video.title_info, window_index=window)
            try:
                resp = self.rater.rate_window(req)
            except OracleError as exc:
                self._push(t, RATER_FAILED, {"window": window, "error": str(exc)})
            else:
                self._push(t + resp.latency_s, RATER_RESPONDED,
                           {"window": window, "submitted_at": t, "frames": frames,
                            "ratings": list(resp.ratings), "summary": resp.total_summary})
        if chunk + 1 < len(self.video):
            self._push(t, WEIGHTS_QUERIED, {"chunk": chunk})

    def _on_RaterFailed(self, t: float, window: int, error: str):
        self.timeline.append(t, RATER_FAILED, window=window, error=error)

    def _on_RaterResponded(self, t, window, submitted_at, frames, ratings, summary):
        cfg = self.cfg
        latency = t - submitted_at
        self._summary = summary
        self.timeline.append(t, RATER_RESPONDED, window=window, latency=latency, ratings=ratings)
        if self.forecaster is None:
            return
        need = required_lout(latency, self.delta_est, cfg.d, cfg.m, cfg.N)
        choice = select_model(need, cfg.pretrained_outputs)
        if choice.shortfall:
            self.shortfalls.append(choice.shortfall)
        series = np.asarray(ratings, dtype=float) / 100.0
        inp = ForecastInput(series, self._frames[frames], self.video.text_embedding)
        values = np.asarray(self.forecaster(inp, choice.l_out), dtype=float)
        if values.shape != (choice.l_out,):
            raise ValueError(f"forecaster returned shape {values.shape}, expected ({choice.l_out},)")
        self.timeline.append(t, FORECAST_SUBMITTED, window=window, l_out=choice.l_out,
                             required=need, shortfall=choice.shortfall, consumes_response_at=t)
        padded = list(values) + [DEFAULT_WEIGHT] * choice.shortfall
        self._push(t + self._forecast_latency(window), FORECAST_COMPLETED,
                   {"window": window, "submitted_at": t, "start_chunk": frames[-1] + 1,
                    "values": padded, "n_real": choice.l_out})

    def _on_ForecastCompleted(self, t, window, submitted_at, start_chunk, values, n_real):
        measured = t - submitted_at
        self.delta_est = self.cfg.ewma_alpha * measured + (1 - self.cfg.ewma_alpha) * self.delta_est
        self.pool.write(start_chunk, values, submitted_at, window, n_real)
        self.timeline.append(t, FORECAST_COMPLETED, window=window, submitted_at=submitted_at,
                             start_chunk=start_chunk, values=[float(v) for v in values], n_real=n_real)

    def _on_WeightsQueried(self, t: float, chunk: int):
        chunks = list(range(chunk + 1, min(chunk + 1 + self.cfg.N, len(self.video))))
        weights, served = self.pool.query(chunks)
        self.timeline.append(t, WEIGHTS_QUERIED, chunk=chunk, chunks=chunks, weights=weights,
                             served=served, hit=all(served))


def run_session(video: VideoRecord, rater: Oracle, forecaster: Forecaster | None, cfg: LiveConfig) -> SessionTimeline:
    return LiveSession(video, rater, forecaster, cfg).run()


def _served(e: dict, horizon: str) -> bool:
    if horizon == "full":
        return bool(e["hit"])
    if horizon == "next":
        return bool(e["served"][0])
    raise ValueError(f"horizon must be 'full' or 'next', got {horizon!r}")


def utility(timeline: SessionTimeline, warmup: int = 0, horizon: str = "full") -> float:
    """Share of weight queries (at chunks >= warmup) answered from the pool.

    ``horizon="full"`` needs all queried weights to come from the pool;
    ``horizon="next"`` only looks at the chunk about to be decided, i.e. the
    share of chunks whose own weight was available when its bitrate was chosen.
    """
    queries = [e for e in timeline.of(WEIGHTS_QUERIED) if e["chunk"] >= warmup]
    if not queries:
        return 0.0
    return sum(1 for e in queries if _served(e, horizon)) / len(queries)


def decision_weights(timeline: SessionTimeline, n_chunks: int, N: int) -> np.ndarray:
    """Row ``j`` holds the weights the ABR saw when deciding chunk ``j`` (chunks ``j..j+N-1``).

    Chunk 0 is decided before any query exists and sees defaults; slots past
    the end of the video are filled with the default too.
    """
    out = np.full((n_chunks, N), DEFAULT_WEIGHT)
    for e in timeline.of(WEIGHTS_QUERIED):
        j = e["chunk"] + 1
        if j < n_chunks:
            out[j, : len(e["weights"])] = e["weights"]
    return out


def forecast_plcc(timeline: SessionTimeline, gt: np.ndarray) -> float:
    """Correlation between pool-served weights (at decision time) and ground truth."""
    pred, truth = [], []
    for e in timeline.of(WEIGHTS_QUERIED):
        if e["chunks"] and e["served"][0]:
            pred.append(e["weights"][0])
            truth.append(gt[e["chunks"][0]])
    try:
        return plcc(pred, truth)
    except (UndefinedCorrelation, ValueError):
        return float("nan")


# --- independent checks --------------------------------------------------------------


def replay_utility(timeline: SessionTimeline, warmup: int = 0, horizon: str = "full") -> float:
    """Rebuild the pool from completion events alone and recount hits."""
    entries: dict[int, tuple[float, int, float, bool]] = {}
    hits = total = 0
    for e in timeline.events:
        if e["event"] == FORECAST_COMPLETED:
            for off, w in enumerate(e["values"]):
                key = (e["submitted_at"], e["window"])
                c = e["start_chunk"] + off
                if c not in entries or key >= entries[c][:2]:
                    entries[c] = (e["submitted_at"], e["window"], w, off >= e["n_real"])
        elif e["event"] == WEIGHTS_QUERIED and e["chunk"] >= warmup:
            total += 1
            wanted = e["chunks"] if horizon == "full" else e["chunks"][:1]
            ok = all(c in entries and not entries[c][3] for c in wanted)
            hits += ok
    return hits / total if total else 0.0


def check_causality(timeline: SessionTimeline, d: float) -> list[str]:
    """Return every violated scheduling rule (an empty list means the timeline is sound)."""
    problems = []
    last_t = -math.inf
    responded: dict[int, float] = {}
    submitted: dict[int, float] = {}
    completed: set[int] = set()
    played: dict[int, float] = {}
    for n, e in enumerate(timeline.events):
        t = e["t"]
        if t < last_t:
            problems.append(f"event {n} goes back in time")
        last_t = t
        kind = e["event"]
        if kind == CHUNK_PLAYED:
            played[e["chunk"]] = t
            if not math.isclose(t, e["chunk"] * d, rel_tol=0, abs_tol=1e-9):
                problems.append(f"chunk {e['chunk']} played at {t}")
        elif kind == RATER_RESPONDED:
            responded[e["window"]] = t
        elif kind == FORECAST_SUBMITTED:
            w = e["window"]
            if w not in responded or responded[w] > t:
                problems.append(f"forecast for window {w} submitted before its rating arrived")
            submitted[w] = t
        elif kind == FORECAST_COMPLETED:
            w = e["window"]
            if w not in submitted or submitted[w] > t:
                problems.append(f"forecast for window {w} completed before submission")
            if w in completed:
                problems.append(f"forecast for window {w} completed twice")
            completed.add(w)
        elif kind == WEIGHTS_QUERIED:
            c = e["chunk"]
            if c not in played or played[c] != t:
                problems.append(f"query at chunk {c} was not answered at its chunk boundary")
    return problems
