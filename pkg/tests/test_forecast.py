import numpy as np
import pytest

from saliency_stream.forecast import (
    AttentionForecaster,
    Batch,
    ForecastHyper,
    ForecastInput,
    LossDiagnostics,
    MLPForecaster,
    TrainConfig,
    TrainingError,
    build_model,
    build_uni_modal,
    dataset_from_videos,
    evaluate,
    forecast_loss,
    gradient_check,
    load_dataset,
    load_model,
    persistence_forecast,
    save_dataset,
    save_model,
    train,
    windows_from_video,
)
from saliency_stream.synth import synth_dataset, synth_video

import brute


def _batch(B=3, L_in=5, L_out=4, E=6, seed=0):
    rng = np.random.default_rng(seed)
    return Batch(rng.random((B, L_in)), rng.normal(size=(B, L_in, E)), rng.normal(size=(B, E)), rng.random((B, L_out)))


def test_loss_zero_at_target():
    g = np.array([0.1, 0.5, 0.3, 0.9])
    assert forecast_loss(g, g, lam=1.0) == pytest.approx(0.0, abs=1e-15)


def test_loss_without_correlation_is_mse():
    rng = np.random.default_rng(1)
    p, g = rng.random(7), rng.random(7)
    assert forecast_loss(p, g, lam=0.0) == np.mean((p - g) ** 2)


def test_loss_hand_case():
    # MSE 1 plus (1 - (-1))
    assert abs(forecast_loss([1, 0], [0, 1], lam=1.0) - 3.0) <= 1e-9


def test_loss_correlation_term_matches_brute_force():
    rng = np.random.default_rng(2)
    p, g = rng.random(9), rng.random(9)
    expected = np.mean((p - g) ** 2) + 0.7 * (1 - brute.pearson(list(p), list(g)))
    assert forecast_loss(p, g, lam=0.7) == pytest.approx(expected, abs=1e-12)


def test_flat_window_counts_in_diagnostics():
    diag = LossDiagnostics()
    loss = forecast_loss([0.5, 0.5, 0.5], [0.1, 0.2, 0.3], 1.0, diag)
    assert diag.flat_correlation == 1
    assert loss == pytest.approx(np.mean((0.5 - np.array([0.1, 0.2, 0.3])) ** 2) + 1.0)


@pytest.mark.parametrize("kind", ["multimodal", "unimodal"])
@pytest.mark.parametrize("lam", [0.0, 1.0])
def test_gradients_match_finite_differences(kind, lam):
    hyper = ForecastHyper(5, 4, d_model=8, heads=2, embed_dim=6, lam=lam, kind=kind, hidden=7)
    model = build_model(hyper, seed=3)
    errors = gradient_check(model, _batch(), lam)
    assert set(errors) == set(model.params)
    assert max(errors.values()) < 1e-4, errors


def test_attention_rows_sum_to_one():
    model = AttentionForecaster(ForecastHyper(5, 4, d_model=8, heads=2, embed_dim=6))
    A = model.attention_weights(_batch())
    assert A.shape == (3, 2, 5, 6)
    assert np.allclose(A.sum(axis=-1), 1.0)


def test_shape_mismatch_is_reported():
    model = AttentionForecaster(ForecastHyper(5, 4, d_model=8, heads=2, embed_dim=7))
    with pytest.raises(ValueError, match="L_in=5"):
        model.forward(_batch())


def test_hyper_validation():
    with pytest.raises(ValueError):
        ForecastHyper(5, 4, d_model=10, heads=4)
    with pytest.raises(ValueError):
        ForecastHyper(0, 4)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_names_parameter():
    model = MLPForecaster(ForecastHyper(5, 4, kind="unimodal", embed_dim=6))
    model.params["W_2"][0, 0] = np.inf
    with pytest.raises(TrainingError) as info:
        model.loss_and_grads(_batch())
    assert info.value.parameter is not None


def test_training_reduces_validation_loss_and_is_deterministic():
    videos = synth_dataset(6, 60, seed=4, embed_dim=8)
    tr = dataset_from_videos(videos[:4], 8, 8, stride=2)
    va = dataset_from_videos(videos[4:], 8, 8, stride=2)
    cfg = TrainConfig(learning_rate=0.05, epochs=8, batch_size=16, rng_seed=1)
    hyper = ForecastHyper(8, 8, d_model=8, heads=2, embed_dim=8)
    before = evaluate(build_model(hyper, 0), va, 1.0)
    r1 = train(build_model(hyper, 0), tr, va, cfg)
    r2 = train(build_model(hyper, 0), tr, va, cfg)
    assert r1.best_val_loss < before
    assert [c["val_loss"] for c in r1.curve] == [c["val_loss"] for c in r2.curve]


def test_trained_model_beats_last_value_baseline():
    videos = synth_dataset(12, 80, seed=6, embed_dim=8)
    tr = dataset_from_videos(videos[:9], 8, 8, stride=2)
    va = dataset_from_videos(videos[9:], 8, 8, stride=2)
    hyper = ForecastHyper(8, 8, d_model=8, heads=2, embed_dim=8, lam=0.0)
    res = train(build_model(hyper, 0), tr, va, TrainConfig(0.05, 60, 16, 0, lam=0.0))
    mse_model = np.mean((res.model.predict(va) - va.target) ** 2)
    mse_last = np.mean((persistence_forecast(va.series, 8) - va.target) ** 2)
    assert mse_model < mse_last


def test_windows_from_video_alignment():
    v = synth_video("w", 20, seed=1, embed_dim=3)
    b = windows_from_video(v, 4, 3, stride=5)
    assert len(b) == 3
    assert np.array_equal(b.series[1], v.gt()[5:9])
    assert np.array_equal(b.target[1], v.gt()[9:12])
    assert windows_from_video(v, 15, 10) is None


def test_model_file_round_trip(tmp_path):
    for kind in ("multimodal", "unimodal"):
        model = build_model(ForecastHyper(5, 4, d_model=8, heads=2, embed_dim=6, kind=kind), seed=2)
        save_model(tmp_path / "m.json", model)
        back = load_model(tmp_path / "m.json")
        b = _batch()
        assert np.array_equal(back.forward(b)[0], model.forward(b)[0])
        save_model(tmp_path / "n.json", back)
        assert (tmp_path / "m.json").read_bytes() == (tmp_path / "n.json").read_bytes()


def test_dataset_file_round_trip(tmp_path):
    b = _batch(B=4)
    save_dataset(tmp_path / "d.jsonl", b)
    back = load_dataset(tmp_path / "d.jsonl")
    for name in ("series", "frames", "text", "target"):
        assert np.array_equal(getattr(back, name), getattr(b, name))


def test_predict_one_clamps_to_unit_interval():
    model = build_uni_modal(ForecastHyper(3, 2, embed_dim=4))
    model.params["b_2"][:] = 5.0
    out = model.predict_one(ForecastInput([0.1, 0.2, 0.3], np.zeros((3, 4)), np.zeros(4)))
    assert np.all(out == 1.0)
