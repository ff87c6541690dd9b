import json
import math

import numpy as np
import pytest

from saliency_stream.live import (
    FORECAST_COMPLETED,
    FORECAST_SUBMITTED,
    RATER_FAILED,
    WEIGHTS_QUERIED,
    LiveConfig,
    ModelBank,
    PersistenceForecaster,
    SessionTimeline,
    ShortfallWarning,
    WeightPool,
    check_causality,
    decision_weights,
    replay_utility,
    required_lout,
    run_session,
    select_model,
    utility,
)
from saliency_stream.forecast import ForecastHyper, build_model
from saliency_stream.rater import MockOracle, MockOracleConfig, OracleError
from saliency_stream.synth import synth_video

import brute


def _oracle(video, mean=0.0, std=0.0, seed=0):
    return MockOracle(video, MockOracleConfig(latency_mean_s=mean, latency_std_s=std, rng_seed=seed))


def test_required_lout_examples():
    assert required_lout(9.83, 1.35, 1.0, 10, 5) == 27
    assert required_lout(0, 0, 1.0, 10, 5) == 15
    assert required_lout(0.1, 0, 1.0, 10, 5) == 16
    assert required_lout(2.0, 0, 2.0, 3, 1) == 5  # exact multiple adds no extra chunk
    with pytest.raises(ValueError):
        required_lout(-1, 0, 1, 1, 1)


def test_select_model():
    assert select_model(27, [10, 20, 30]) == (30, 0)
    assert select_model(10, [10, 20, 30]) == (10, 0)
    with pytest.warns(ShortfallWarning):
        assert select_model(35, [10, 20, 30]) == (30, 5)


def test_config_validation():
    with pytest.raises(ValueError):
        LiveConfig(pretrained_outputs=[20, 10])
    with pytest.raises(ValueError):
        LiveConfig(d=0)
    assert LiveConfig(m=4).pretrained_outputs == [4, 8, 12]


def test_pool_defaults_and_latest_submission_wins():
    pool = WeightPool()
    assert pool.query([3, 4]) == ([1.0, 1.0], [False, False])
    pool.write(3, [0.2, 0.3, 1.0], submitted_at=5.0, window=1, n_real=2)
    pool.write(4, [0.9], submitted_at=4.0, window=0, n_real=1)  # older submission loses
    assert pool.query([3, 4, 5]) == ([0.2, 0.3, 1.0], [True, True, False])
    pool.write(4, [0.7], submitted_at=6.0, window=2, n_real=1)
    assert pool.query([4])[0] == [0.7]


def test_no_weights_before_first_forecast():
    v = synth_video("a", 60, seed=1, embed_dim=4)
    tl = run_session(v, _oracle(v, 9.83, 0.83), PersistenceForecaster(), LiveConfig(m=10, N=5,
                     pretrained_outputs=[10, 20, 30]))
    first = min(e["t"] for e in tl.of(FORECAST_COMPLETED))
    early = [e for e in tl.of(WEIGHTS_QUERIED) if e["t"] < first]
    assert early and all(e["weights"] == [1.0] * len(e["chunks"]) for e in early)


def test_zero_latency_utility_reaches_one_after_warmup():
    v = synth_video("z", 40, seed=2, embed_dim=4)
    cfg = LiveConfig(m=2, N=2, forecast_latency_est_s=0.0)
    tl = run_session(v, _oracle(v), PersistenceForecaster(), cfg)
    assert utility(tl, warmup=2) == 1.0
    assert utility(tl) < 1.0  # chunks 0 and 1 precede any rating
    assert check_causality(tl, cfg.d) == []


def test_no_forecaster_means_all_defaults():
    v = synth_video("n", 30, seed=3, embed_dim=4)
    tl = run_session(v, _oracle(v, 3.0, 1.0), None, LiveConfig(m=5, N=3))
    assert utility(tl) == 0.0
    assert np.all(decision_weights(tl, 30, 3) == 1.0)


def test_timeline_is_deterministic_and_round_trips(tmp_path):
    v = synth_video("d", 80, seed=4, embed_dim=4)
    cfg = LiveConfig(m=4, N=5, pretrained_outputs=[4, 8, 12, 16, 20], forecast_latency_std_s=0.3, rng_seed=7)
    a = run_session(v, _oracle(v, 4.2, 1.8, seed=7), PersistenceForecaster(), cfg)
    b = run_session(v, _oracle(v, 4.2, 1.8, seed=7), PersistenceForecaster(), cfg)
    assert a.to_jsonl() == b.to_jsonl()
    a.save(tmp_path / "t.jsonl")
    back = SessionTimeline.load(tmp_path / "t.jsonl")
    assert back.events == a.events
    assert replay_utility(back) == utility(a)


def test_replay_matches_independent_recount():
    v = synth_video("r", 120, seed=5, embed_dim=4)
    cfg = LiveConfig(m=4, N=5, pretrained_outputs=[4, 8, 12], forecast_latency_std_s=0.4, rng_seed=1)
    with pytest.warns(ShortfallWarning):
        tl = run_session(v, _oracle(v, 4.2, 1.8, seed=1), PersistenceForecaster(), cfg)
    hits = brute.replay_hits(json.loads(line) for line in tl.to_jsonl().splitlines())
    assert sum(hits) / len(hits) == utility(tl) == replay_utility(tl)
    assert 0 < utility(tl) < 1


def test_shortfall_tail_is_padded_and_not_counted_as_served():
    v = synth_video("s", 60, seed=6, embed_dim=4)
    cfg = LiveConfig(m=10, N=5, pretrained_outputs=[10], forecast_latency_est_s=1.35)
    with pytest.warns(ShortfallWarning):
        tl = run_session(v, _oracle(v, 9.83), PersistenceForecaster(), cfg)
    sub = tl.of(FORECAST_SUBMITTED)[0]
    assert sub["l_out"] == 10 and sub["shortfall"] == sub["required"] - 10
    done = tl.of(FORECAST_COMPLETED)[0]
    assert done["values"][10:] == [1.0] * sub["shortfall"]
    assert done["n_real"] == 10


def test_forecast_covers_chunks_after_rated_window():
    v = synth_video("c", 50, seed=8, embed_dim=4)
    tl = run_session(v, _oracle(v), PersistenceForecaster(), LiveConfig(m=5, N=2, forecast_latency_est_s=0.0))
    for e in tl.of(FORECAST_COMPLETED):
        assert e["start_chunk"] == (e["window"] + 1) * 5


class FailingOracle(MockOracle):
    def _rate(self, req, ordinal):
        if req.window_index == 1:
            raise OracleError("boom")
        return super()._rate(req, ordinal)


def test_rater_error_skips_window():
    v = synth_video("f", 30, seed=9, embed_dim=4)
    oracle = FailingOracle(v, MockOracleConfig(latency_mean_s=0.0, latency_std_s=0.0))
    tl = run_session(v, oracle, PersistenceForecaster(), LiveConfig(m=5, N=2, forecast_latency_est_s=0.0))
    assert [e["window"] for e in tl.of(RATER_FAILED)] == [1]
    assert 1 not in {e["window"] for e in tl.of(FORECAST_SUBMITTED)}
    assert check_causality(tl, 1.0) == []


def test_model_bank_drives_forecasts():
    v = synth_video("m", 40, seed=10, embed_dim=4)
    bank = ModelBank({l: build_model(ForecastHyper(4, l, d_model=4, heads=2, embed_dim=4), seed=l) for l in (4, 8, 12)})
    assert bank.missing([4, 8, 16]) == [16]
    tl = run_session(v, _oracle(v, 1.0), bank, LiveConfig(m=4, N=2, forecast_latency_est_s=0.5))
    assert {e["l_out"] for e in tl.of(FORECAST_SUBMITTED)} <= {4, 8, 12}
    assert check_causality(tl, 1.0) == []


def test_causality_checker_flags_violations():
    tl = SessionTimeline()
    tl.events = [
        {"t": 0.0, "event": "ChunkPlayed", "chunk": 0},
        {"t": 1.0, "event": "ForecastSubmitted", "window": 0},
        {"t": 0.5, "event": "WeightsQueried", "chunk": 0, "chunks": [1], "weights": [1.0], "served": [False], "hit": False},
    ]
    problems = check_causality(tl, 1.0)
    assert any("rating" in p for p in problems)
    assert any("back in time" in p for p in problems)
    assert any("boundary" in p for p in problems)


def test_ewma_tracks_forecast_latency():
    v = synth_video("e", 60, seed=11, embed_dim=4)
    from saliency_stream.live import LiveSession

    s = LiveSession(v, _oracle(v, 1.0), PersistenceForecaster(), LiveConfig(m=5, N=2, forecast_latency_est_s=0.0,
                    forecast_latency_mean_s=2.0, ewma_alpha=0.5))
    s.run()
    assert 1.9 < s.delta_est <= 2.0
    assert math.isclose(s.delta_est, 2.0 * (1 - 0.5 ** len(s.timeline.of(FORECAST_COMPLETED))))
