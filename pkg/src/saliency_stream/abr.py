"""Trace-driven chunk download simulator and bitrate controllers.

Per-chunk QoE follows the Pensieve form: quality minus a rebuffer penalty minus
a smoothness penalty on the quality change. A chunk weight ``w_i`` scales the
whole term by default (``weight_scope="all"``) or only the quality part
(``weight_scope="quality"``).

The MPC controller enumerates every plan of ``N`` levels, simulates the buffer
under a conservative throughput estimate and returns the first level of the
best plan.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

DEFAULT_LADDER_KBPS = (300, 750, 1200, 1850, 2850, 4300)
_TIE_TOL = 1e-9
_STALL_EPS_S = 1e-9


@dataclass(frozen=True)
class BitrateLadder:
    levels_kbps: tuple[float, ...] = DEFAULT_LADDER_KBPS

    def __post_init__(self):
        lv = tuple(float(x) for x in self.levels_kbps)
        if not lv or any(x <= 0 for x in lv) or any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError(f"ladder must be positive and strictly ascending: {lv}")
        object.__setattr__(self, "levels_kbps", lv)

    def __len__(self):
        return len(self.levels_kbps)

    @property
    def top(self) -> int:
        return len(self.levels_kbps) - 1


@dataclass(frozen=True)
class QoeParams:
    rebuffer_penalty: float = 4.3
    smoothness_penalty: float = 1.0
    quality_map: str = "linear"
    weight_scope: str = "all"

    def __post_init__(self):
        if self.rebuffer_penalty < 0 or self.smoothness_penalty < 0:
            raise ValueError("penalties must be >= 0")
        if self.quality_map not in ("linear", "log"):
            raise ValueError(f"quality_map must be 'linear' or 'log', got {self.quality_map!r}")
        if self.weight_scope not in ("all", "quality"):
            raise ValueError(f"weight_scope must be 'all' or 'quality', got {self.weight_scope!r}")

    @classmethod
    def log_variant(cls, **kw) -> "QoeParams":
        kw.setdefault("rebuffer_penalty", 2.66)
        return cls(quality_map="log", **kw)

    def quality(self, ladder: BitrateLadder) -> np.ndarray:
        kbps = np.asarray(ladder.levels_kbps)
        if self.quality_map == "linear":
            return kbps / 1000.0
        return np.log(kbps / kbps[0])


def chunk_terms(levels, rebuffers, ladder: BitrateLadder, params: QoeParams, prev_level: int | None = None):
    """Quality and penalty parts of each chunk's QoE (penalty is rebuffer + smoothness)."""
    levels = np.asarray(levels, dtype=int)
    rebuffers = np.asarray(rebuffers, dtype=float)
    if levels.shape != rebuffers.shape:
        raise ValueError("levels and rebuffers differ in length")
    q = params.quality(ladder)[levels]
    prev = np.empty_like(q)
    if q.size:
        prev[0] = q[0] if prev_level is None else params.quality(ladder)[prev_level]
        prev[1:] = q[:-1]
    penalty = params.rebuffer_penalty * rebuffers + params.smoothness_penalty * np.abs(q - prev)
    return q, penalty


def per_chunk_qoe(levels, rebuffers, weights, ladder: BitrateLadder, params: QoeParams, prev_level: int | None = None) -> np.ndarray:
    q, penalty = chunk_terms(levels, rebuffers, ladder, params, prev_level)
    w = np.asarray(weights, dtype=float)
    if w.shape != q.shape:
        raise ValueError(f"{w.size} weights for {q.size} chunks")
    if params.weight_scope == "all":
        return w * (q - penalty)
    return w * q - penalty


def weighted_qoe(levels, rebuffers, weights, ladder: BitrateLadder | None = None, params: QoeParams | None = None) -> float:
    ladder = ladder or BitrateLadder()
    params = params or QoeParams()
    return float(per_chunk_qoe(levels, rebuffers, weights, ladder, params).sum())


class TraceError(ValueError):
    pass


class NetworkTrace:
    """Piecewise-constant throughput; sample ``k`` holds until sample ``k+1``. Replays cyclically."""

    def __init__(self, times_s: Sequence[float], kbps: Sequence[float]):
        t = np.asarray(times_s, dtype=float)
        c = np.asarray(kbps, dtype=float)
        if t.ndim != 1 or t.shape != c.shape or t.size == 0:
            raise ValueError("trace needs matching, non-empty timestamp and throughput columns")
        if np.any(np.diff(t) <= 0):
            raise ValueError("trace timestamps must be strictly increasing")
        if np.any(~(c > 0)):
            raise ValueError("trace throughput must be > 0")
        self.times = t - t[0]
        self.kbps = c
        step = self.times[-1] - self.times[-2] if t.size > 1 else 1.0
        self.period = self.times[-1] + step
        self._ends = np.append(self.times[1:], self.period)

    @classmethod
    def constant(cls, kbps: float, duration_s: float = 1.0) -> "NetworkTrace":
        return cls([0.0], [kbps]) if duration_s <= 0 else cls([0.0, duration_s], [kbps, kbps])

    @classmethod
    def load(cls, path: str | Path) -> "NetworkTrace":
        times, rates = [], []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            try:
                if len(parts) != 2:
                    raise ValueError
                times.append(float(parts[0]))
                rates.append(float(parts[1]))
            except ValueError:
                raise TraceError(f"{path}:{lineno}: expected '<seconds> <kbps>', got {line!r}") from None
        try:
            return cls(times, rates)
        except ValueError as exc:
            raise TraceError(f"{path}: {exc}") from None

    def save(self, path: str | Path):
        Path(path).write_text("".join(f"{float(t)!r} {float(c)!r}\n" for t, c in zip(self.times, self.kbps)))

    def download_time(self, start_s: float, size_kbit: float) -> float:
        remaining = float(size_kbit)
        t = float(start_s)
        while True:
            phase = t % self.period
            k = int(np.searchsorted(self._ends, phase, side="right"))
            k = min(k, self.kbps.size - 1)
            rate = self.kbps[k]
            span = self._ends[k] - phase
            if rate * span >= remaining or math.isinf(rate):
                return t + remaining / rate - start_s
            remaining -= rate * span
            t += span


@dataclass
class StreamState:
    buffer_s: float = 0.0
    last_level: int | None = None
    chunk: int = 0
    rebuffer_s: float = 0.0

    def __post_init__(self):
        if self.buffer_s < 0:
            raise ValueError("buffer_s must be >= 0")


def harmonic_mean(samples: Sequence[float]) -> float:
    x = np.asarray(samples, dtype=float)
    inv = np.sum(1.0 / x)
    return math.inf if inv == 0 else float(x.size / inv)


def robust_throughput(history_kbps: Sequence[float], errors: Sequence[float] = (), window: int = 5) -> float:
    """Harmonic mean of the last ``window`` samples, discounted by the worst recent relative error."""
    hm = harmonic_mean(list(history_kbps)[-window:])
    worst = max(list(errors)[-window:], default=0.0)
    return hm / (1.0 + worst)


_PLAN_CACHE: dict[tuple[int, int], np.ndarray] = {}


def all_plans(n_levels: int, horizon: int) -> np.ndarray:
    """Every level sequence of length ``horizon`` in lexicographic order."""
    key = (n_levels, horizon)
    if key not in _PLAN_CACHE:
        _PLAN_CACHE[key] = np.array(list(itertools.product(range(n_levels), repeat=horizon)), dtype=int).reshape(-1, horizon)
    return _PLAN_CACHE[key]


def plan_values(
    state: StreamState,
    weights_ahead: Sequence[float],
    throughput_kbps: float,
    chunk_s: float,
    ladder: BitrateLadder,
    params: QoeParams,
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted QoE of every plan under a fixed throughput. Returns (plans, values)."""
    w = np.asarray(weights_ahead, dtype=float)
    plans = all_plans(len(ladder), w.size)
    kbps = np.asarray(ladder.levels_kbps)
    qual = params.quality(ladder)
    buffer = np.full(plans.shape[0], float(state.buffer_s))
    prev_q = np.full(plans.shape[0], np.nan if state.last_level is None else qual[state.last_level])
    total = np.zeros(plans.shape[0])
    for j in range(w.size):
        q = qual[plans[:, j]]
        dl = kbps[plans[:, j]] * chunk_s / throughput_kbps
        rebuf = np.maximum(dl - buffer, 0.0)
        buffer = np.maximum(buffer - dl, 0.0) + chunk_s
        smooth = np.where(np.isnan(prev_q), 0.0, np.abs(q - np.nan_to_num(prev_q)))
        penalty = params.rebuffer_penalty * rebuf + params.smoothness_penalty * smooth
        total += w[j] * (q - penalty) if params.weight_scope == "all" else w[j] * q - penalty
        prev_q = q
    return plans, total


def best_plan(plans: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Highest value; near-ties go to the lexicographically lowest plan."""
    top = values.max()
    ok = np.flatnonzero(values >= top - _TIE_TOL * max(1.0, abs(top)))
    return plans[ok[0]]


def mpc_plan(state, weights_ahead, throughput_history, ladder=None, params=None, errors=(), chunk_s: float = 1.0):
    """Best plan under the robust throughput estimate, or ``None`` without history."""
    ladder = ladder or BitrateLadder()
    params = params or QoeParams()
    if len(throughput_history) == 0 or len(weights_ahead) == 0:
        return None
    tp = robust_throughput(throughput_history, errors)
    plans, values = plan_values(state, weights_ahead, tp, chunk_s, ladder, params)
    return best_plan(plans, values)


def mpc_decide(state, weights_ahead, throughput_history, ladder=None, params=None, errors=(), chunk_s: float = 1.0) -> int:
    plan = mpc_plan(state, weights_ahead, throughput_history, ladder, params, errors, chunk_s)
    return 0 if plan is None else int(plan[0])


class Controller(Protocol):
    def decide(self, state: StreamState, weights_ahead: Sequence[float], history_kbps: Sequence[float], chunk_s: float) -> int: ...

    def observe(self, measured_kbps: float): ...


class MPCController:
    """RobustMPC; with ``weighted=False`` the weights are ignored (all ones)."""

    name = "mpc"

    def __init__(self, ladder: BitrateLadder | None = None, params: QoeParams | None = None, weighted: bool = True):
        self.ladder = ladder or BitrateLadder()
        self.params = params or QoeParams()
        self.weighted = weighted
        self.errors: list[float] = []
        self._last_prediction: float | None = None

    def decide(self, state, weights_ahead, history_kbps, chunk_s):
        w = np.asarray(weights_ahead, dtype=float)
        if not self.weighted:
            w = np.ones_like(w)
        self._last_prediction = harmonic_mean(list(history_kbps)[-5:]) if len(history_kbps) else None
        return mpc_decide(state, w, history_kbps, self.ladder, self.params, self.errors, chunk_s)

    def observe(self, measured_kbps):
        pred = self._last_prediction
        if pred is None:
            return
        if math.isinf(measured_kbps):
            self.errors.append(0.0 if math.isinf(pred) else 1.0)
        else:
            self.errors.append(abs(pred - measured_kbps) / measured_kbps)


class BufferBasedController:
    """Maps buffer occupancy linearly onto the ladder between a reservoir and a cushion."""

    name = "bb"

    def __init__(self, ladder: BitrateLadder | None = None, reservoir_s: float = 5.0, cushion_s: float = 10.0):
        self.ladder = ladder or BitrateLadder()
        self.reservoir_s = reservoir_s
        self.cushion_s = cushion_s

    def decide(self, state, weights_ahead, history_kbps, chunk_s):
        frac = (state.buffer_s - self.reservoir_s) / self.cushion_s
        return int(np.clip(math.floor(frac * self.ladder.top + 1e-9), 0, self.ladder.top))

    def observe(self, measured_kbps):
        pass


class RateBasedController:
    """Highest level not above the harmonic mean of recent throughput."""

    name = "rb"

    def __init__(self, ladder: BitrateLadder | None = None):
        self.ladder = ladder or BitrateLadder()

    def decide(self, state, weights_ahead, history_kbps, chunk_s):
        if not len(history_kbps):
            return 0
        tp = harmonic_mean(list(history_kbps)[-5:])
        fits = [i for i, r in enumerate(self.ladder.levels_kbps) if r <= tp]
        return fits[-1] if fits else 0

    def observe(self, measured_kbps):
        pass


@dataclass
class SessionReport:
    rows: list[dict] = field(default_factory=list)
    weighted_qoe: float = 0.0
    unweighted_qoe: float = 0.0
    total_rebuffer_s: float = 0.0
    startup_s: float = 0.0
    controller: str = ""
    seed: int | None = None

    @property
    def levels(self) -> list[int]:
        return [r["level"] for r in self.rows]

    @property
    def rebuffers(self) -> list[float]:
        return [r["rebuffer_s"] for r in self.rows]

    @property
    def weights(self) -> list[float]:
        return [r["weight"] for r in self.rows]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SessionReport":
        return cls(**json.loads(text))


def simulate_session(
    n_chunks: int,
    trace: NetworkTrace,
    controller,
    decision_weights: np.ndarray | None = None,
    qoe_weights: Sequence[float] | None = None,
    ladder: BitrateLadder | None = None,
    params: QoeParams | None = None,
    chunk_s: float = 1.0,
    horizon: int = 5,
    buffer_cap_s: float = 60.0,
    seed: int | None = None,
) -> SessionReport:
    """Download ``n_chunks`` chunks back to back over ``trace``.

    ``decision_weights[j]`` is what the controller sees when choosing chunk
    ``j`` (the weights of chunks ``j..j+horizon-1``). ``qoe_weights`` scores the
    session; it defaults to ``decision_weights[:, 0]``. Playback starts after the
    first chunk arrives, so that wait counts as startup delay, not rebuffering.
    """
    ladder = ladder or BitrateLadder()
    params = params or QoeParams()
    if decision_weights is None:
        decision_weights = np.ones((n_chunks, horizon))
    decision_weights = np.asarray(decision_weights, dtype=float)
    if decision_weights.shape[0] != n_chunks:
        raise ValueError(f"decision weights have {decision_weights.shape[0]} rows for {n_chunks} chunks")
    if qoe_weights is None:
        qoe_weights = decision_weights[:, 0]
    qoe_weights = np.asarray(qoe_weights, dtype=float)
    if qoe_weights.shape != (n_chunks,):
        raise ValueError("qoe_weights must have one entry per chunk")

    state = StreamState()
    history: list[float] = []
    t = 0.0
    rows = []
    startup = 0.0
    for j in range(n_chunks):
        ahead = decision_weights[j, : max(1, min(decision_weights.shape[1], n_chunks - j))]
        level = int(controller.decide(state, ahead, history, chunk_s))
        if not 0 <= level <= ladder.top:
            raise ValueError(f"controller chose level {level} outside the ladder")
        size = ladder.levels_kbps[level] * chunk_s
        dl = float(trace.download_time(t, size))
        if j == 0:
            rebuf = 0.0
            startup = dl
            buffer = chunk_s
        else:
            rebuf = max(dl - state.buffer_s, 0.0)
            if rebuf < _STALL_EPS_S:  # segment-boundary rounding, not a stall
                rebuf = 0.0
            buffer = max(state.buffer_s - dl, 0.0) + chunk_s
        t += dl
        if buffer > buffer_cap_s:
            t += buffer - buffer_cap_s
            buffer = buffer_cap_s
        measured = size / dl if dl > 0 else math.inf
        history.append(measured)
        controller.observe(measured)
        rows.append({"chunk": j, "level": level, "bitrate_kbps": ladder.levels_kbps[level], "download_s": dl,
                     "rebuffer_s": rebuf, "buffer_s": buffer, "weight": float(qoe_weights[j])})
        state = StreamState(buffer, level, j + 1, state.rebuffer_s + rebuf)

    levels = [r["level"] for r in rows]
    rebufs = [r["rebuffer_s"] for r in rows]
    q = per_chunk_qoe(levels, rebufs, qoe_weights, ladder, params)
    for r, qi in zip(rows, q):
        r["q"] = float(qi)
    return SessionReport(
        rows=rows,
        weighted_qoe=float(q.sum()),
        unweighted_qoe=weighted_qoe(levels, rebufs, np.ones(n_chunks), ladder, params),
        total_rebuffer_s=float(sum(rebufs)),
        startup_s=float(startup),
        controller=getattr(controller, "name", type(controller).__name__),
        seed=seed,
    )
