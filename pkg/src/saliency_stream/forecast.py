"""Future-weight forecasters with hand-written gradients.

``AttentionForecaster`` (multi-modal): per-step series features act as queries
against key/value tokens built from the frame embeddings plus one pooled text
token (a key bias would cancel inside the softmax, so keys have none)::

    Q = x_t * w_q + b_q + P_q                     (L_in x d)
    K = [frames; text] W_k + P_k                  (L_in+1 x d)
    V = [frames; text] W_v + b_v                  (L_in+1 x d)
    Z = Q + concat_h softmax(Q_h K_h^T / sqrt(d_h)) V_h
    y = flatten(Z) W_o + b_o                      (L_out)

``MLPForecaster`` (uni-modal) only sees the series: ``y = tanh(x W_1 + b_1) W_2 + b_2``.

Both train on ``MSE + lam * (1 - pearson(pred, target))`` with plain gradient
descent, float64 throughout.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import VideoRecord

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, message: str, parameter: str | None = None):
        super().__init__(message)
        self.parameter = parameter


@dataclass
class ForecastHyper:
    L_in: int
    L_out: int
    d_model: int = 32
    heads: int = 4
    embed_dim: int = 64
    lam: float = 1.0
    kind: str = "multimodal"  # or "unimodal"
    hidden: int = 32  # unimodal only

    def __post_init__(self):
        if self.L_in < 1 or self.L_out < 1:
            raise ValueError("L_in and L_out must be >= 1")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.kind not in ("multimodal", "unimodal"):
            raise ValueError(f"unknown model kind {self.kind!r}")


@dataclass
class ForecastInput:
    series: np.ndarray
    frame_embeddings: np.ndarray
    text_embedding: np.ndarray

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=float)
        self.frame_embeddings = np.asarray(self.frame_embeddings, dtype=float)
        self.text_embedding = np.asarray(self.text_embedding, dtype=float)
        if self.frame_embeddings.shape[0] != self.series.size:
            raise ValueError("frame embeddings must have one row per series step")
        if not (np.all(np.isfinite(self.series)) and np.all(np.isfinite(self.frame_embeddings))):
            raise ValueError("non-finite forecast input")


@dataclass
class Batch:
    series: np.ndarray  # (B, L_in)
    frames: np.ndarray  # (B, L_in, E)
    text: np.ndarray  # (B, E)
    target: np.ndarray | None = None  # (B, L_out)

    def __len__(self):
        return self.series.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(
            self.series[idx], self.frames[idx], self.text[idx], None if self.target is None else self.target[idx]
        )

    @classmethod
    def from_inputs(cls, inputs: Sequence[ForecastInput], targets=None) -> "Batch":
        return cls(
            np.stack([i.series for i in inputs]),
            np.stack([i.frame_embeddings for i in inputs]),
            np.stack([i.text_embedding for i in inputs]),
            None if targets is None else np.asarray(targets, dtype=float).reshape(len(inputs), -1),
        )


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 60
    batch_size: int = 32
    rng_seed: int = 0
    lam: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate, epochs and batch_size must be positive")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


# --- loss ------------------------------------------------------------------------


@dataclass
class LossDiagnostics:
    flat_correlation: int = 0


def forecast_loss(pred, gt, lam: float = 1.0, diagnostics: LossDiagnostics | None = None) -> float:
    """MSE plus ``lam * (1 - pearson)`` for one forecast window."""
    pred = np.asarray(pred, dtype=float).ravel()
    gt = np.asarray(gt, dtype=float).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {gt.size}")
    total, _ = _loss_and_dpred(pred[None, :], gt[None, :], lam, diagnostics or LossDiagnostics())
    return total


def _loss_and_dpred(y: np.ndarray, g: np.ndarray, lam: float, diag: LossDiagnostics) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient w.r.t. predictions ``y`` (B x L)."""
    B, L = y.shape
    resid = y - g
    loss = np.mean(resid * resid, axis=1)
    dy = 2.0 * resid / L
    if lam:
        yc = y - y.mean(axis=1, keepdims=True)
        gc = g - g.mean(axis=1, keepdims=True)
        syy = np.sum(yc * yc, axis=1)
        sgg = np.sum(gc * gc, axis=1)
        ok = (syy > 0) & (sgg > 0) & (L >= 2)
        diag.flat_correlation += int(np.count_nonzero(~ok))
        r = np.zeros(B)
        if np.any(ok):
            denom = np.sqrt(syy[ok] * sgg[ok])
            r[ok] = np.sum(yc[ok] * gc[ok], axis=1) / denom
            dr = gc[ok] / denom[:, None] - r[ok][:, None] * yc[ok] / syy[ok][:, None]
            dy[ok] -= lam * dr
        loss = loss + lam * (1.0 - r)
    return float(loss.mean()), dy / B


# --- models ----------------------------------------------------------------------


def _init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape)


class _Forecaster:
    hyper: ForecastHyper
    params: dict[str, np.ndarray]

    def forward(self, batch: Batch) -> tuple[np.ndarray, dict]:
        raise NotImplementedError

    def backward(self, cache: dict, dy: np.ndarray) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def predict(self, batch: Batch) -> np.ndarray:
        y, _ = self.forward(batch)
        return np.clip(y, 0.0, 1.0)

    def predict_one(self, inp: ForecastInput) -> np.ndarray:
        return self.predict(Batch.from_inputs([inp]))[0]

    def loss_and_grads(self, batch: Batch, lam: float | None = None, diag: LossDiagnostics | None = None):
        lam = self.hyper.lam if lam is None else lam
        y, cache = self.forward(batch)
        loss, dy = _loss_and_dpred(y, batch.target, lam, diag or LossDiagnostics())
        grads = self.backward(cache, dy)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter {name!r}", parameter=name)
        return loss, grads

    def copy(self):
        clone = self.__class__.__new__(self.__class__)
        clone.hyper = ForecastHyper(**asdict(self.hyper))
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


class AttentionForecaster(_Forecaster):
    def __init__(self, hyper: ForecastHyper, seed: int = 0):
        if hyper.kind != "multimodal":
            raise ValueError("AttentionForecaster needs kind='multimodal'")
        self.hyper = hyper
        rng = np.random.default_rng(seed)
        L, d, E, S = hyper.L_in, hyper.d_model, hyper.embed_dim, hyper.L_in + 1
        self.params = {
            "w_q": _init(rng, 1, d),
            "b_q": np.zeros(d),
            "pos_q": _init(rng, d, (L, d)),
            "W_k": _init(rng, E, (E, d)),
            "pos_k": _init(rng, d, (S, d)),
            "W_v": _init(rng, E, (E, d)),
            "b_v": np.zeros(d),
            "W_o": _init(rng, L * d, (L * d, hyper.L_out)),
            "b_o": np.full(hyper.L_out, 0.5),
        }

    def _split(self, t: np.ndarray) -> np.ndarray:
        B, n, d = t.shape
        H = self.hyper.heads
        return t.reshape(B, n, H, d // H).transpose(0, 2, 1, 3)

    @staticmethod
    def _merge(t: np.ndarray) -> np.ndarray:
        B, H, n, dh = t.shape
        return t.transpose(0, 2, 1, 3).reshape(B, n, H * dh)

    def forward(self, batch: Batch):
        p = self.params
        hp = self.hyper
        x = batch.series
        if x.shape[1] != hp.L_in or batch.frames.shape[1:] != (hp.L_in, hp.embed_dim) or batch.text.shape[1] != hp.embed_dim:
            raise ValueError(
                f"input shapes {x.shape}, {batch.frames.shape}, {batch.text.shape} do not match "
                f"L_in={hp.L_in}, E={hp.embed_dim}"
            )
        tokens = np.concatenate([batch.frames, batch.text[:, None, :]], axis=1)  # (B, S, E)
        Q = x[:, :, None] * p["w_q"] + p["b_q"] + p["pos_q"]
        K = tokens @ p["W_k"] + p["pos_k"]
        V = tokens @ p["W_v"] + p["b_v"]
        Qh, Kh, Vh = self._split(Q), self._split(K), self._split(V)
        scale = 1.0 / math.sqrt(hp.d_model // hp.heads)
        logits = np.einsum("bhld,bhsd->bhls", Qh, Kh) * scale
        logits -= logits.max(axis=-1, keepdims=True)
        A = np.exp(logits)
        A /= A.sum(axis=-1, keepdims=True)
        O = self._merge(np.einsum("bhls,bhsd->bhld", A, Vh))
        Z = Q + O
        flat = Z.reshape(Z.shape[0], -1)
        y = flat @ p["W_o"] + p["b_o"]
        cache = {"x": x, "tokens": tokens, "Qh": Qh, "Kh": Kh, "Vh": Vh, "A": A, "flat": flat, "scale": scale}
        return y, cache

    def attention_weights(self, batch: Batch) -> np.ndarray:
        return self.forward(batch)[1]["A"]

    def backward(self, cache, dy):
        p = self.params
        B = dy.shape[0]
        L, d = self.hyper.L_in, self.hyper.d_model
        g = {}
        g["W_o"] = cache["flat"].T @ dy
        g["b_o"] = dy.sum(axis=0)
        dZ = (dy @ p["W_o"].T).reshape(B, L, d)
        dOh = self._split(dZ)
        A, Qh, Kh, Vh, scale = cache["A"], cache["Qh"], cache["Kh"], cache["Vh"], cache["scale"]
        dA = np.einsum("bhld,bhsd->bhls", dOh, Vh)
        dVh = np.einsum("bhls,bhld->bhsd", A, dOh)
        dlogits = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * scale
        dQ = dZ + self._merge(np.einsum("bhls,bhsd->bhld", dlogits, Kh))
        dK = self._merge(np.einsum("bhls,bhld->bhsd", dlogits, Qh))
        dV = self._merge(dVh)
        tokens, x = cache["tokens"], cache["x"]
        g["W_k"] = np.einsum("bse,bsd->ed", tokens, dK)
        g["pos_k"] = dK.sum(axis=0)
        g["W_v"] = np.einsum("bse,bsd->ed", tokens, dV)
        g["b_v"] = dV.sum(axis=(0, 1))
        g["w_q"] = np.einsum("bl,bld->d", x, dQ)
        g["b_q"] = dQ.sum(axis=(0, 1))
        g["pos_q"] = dQ.sum(axis=0)
        return g


class MLPForecaster(_Forecaster):
    def __init__(self, hyper: ForecastHyper, seed: int = 0):
        if hyper.kind != "unimodal":
            raise ValueError("MLPForecaster needs kind='unimodal'")
        self.hyper = hyper
        rng = np.random.default_rng(seed)
        self.params = {
            "W_1": _init(rng, hyper.L_in, (hyper.L_in, hyper.hidden)),
            "b_1": np.zeros(hyper.hidden),
            "W_2": _init(rng, hyper.hidden, (hyper.hidden, hyper.L_out)),
            "b_2": np.full(hyper.L_out, 0.5),
        }

    def forward(self, batch: Batch):
        x = batch.series
        if x.shape[1] != self.hyper.L_in:
            raise ValueError(f"series length {x.shape[1]} does not match L_in={self.hyper.L_in}")
        h = np.tanh(x @ self.params["W_1"] + self.params["b_1"])
        return h @ self.params["W_2"] + self.params["b_2"], {"x": x, "h": h}

    def backward(self, cache, dy):
        h = cache["h"]
        dh = (dy @ self.params["W_2"].T) * (1.0 - h * h)
        return {
            "W_2": h.T @ dy,
            "b_2": dy.sum(axis=0),
            "W_1": cache["x"].T @ dh,
            "b_1": dh.sum(axis=0),
        }


def build_model(hyper: ForecastHyper, seed: int = 0) -> _Forecaster:
    return AttentionForecaster(hyper, seed) if hyper.kind == "multimodal" else MLPForecaster(hyper, seed)


def build_uni_modal(hyper: ForecastHyper, seed: int = 0) -> MLPForecaster:
    kw = asdict(hyper)
    kw["kind"] = "unimodal"
    return MLPForecaster(ForecastHyper(**kw), seed)


# --- gradient check -----------------------------------------------------------------


def gradient_check(model: _Forecaster, batch: Batch, lam: float | None = None, h: float = 1e-5) -> dict[str, float]:
    """Relative error per parameter tensor between analytic and central-difference gradients.

    The error of a tensor is ``max|g_a - g_n| / max(max|g_a|, max|g_n|)``, i.e.
    the worst element measured against the tensor's gradient scale.
    """
    lam = model.hyper.lam if lam is None else lam
    _, analytic = model.loss_and_grads(batch, lam)
    errors = {}
    for name, param in model.params.items():
        numeric = np.zeros_like(param)
        flat = param.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = _loss_and_dpred(model.forward(batch)[0], batch.target, lam, LossDiagnostics())
            flat[i] = orig - h
            lm, _ = _loss_and_dpred(model.forward(batch)[0], batch.target, lam, LossDiagnostics())
            flat[i] = orig
            nflat[i] = (lp - lm) / (2 * h)
        scale = max(np.abs(analytic[name]).max(), np.abs(numeric).max())
        errors[name] = 0.0 if scale == 0 else float(np.abs(analytic[name] - numeric).max() / scale)
    return errors


# --- training -----------------------------------------------------------------------


@dataclass
class TrainResult:
    model: _Forecaster
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")


def evaluate(model: _Forecaster, batch: Batch, lam: float) -> float:
    y, _ = model.forward(batch)
    return _loss_and_dpred(y, batch.target, lam, LossDiagnostics())[0]


def train(model: _Forecaster, train_set: Batch, val_set: Batch | None, cfg: TrainConfig) -> TrainResult:
    """Mini-batch gradient descent; returns the parameters with the lowest validation loss."""
    rng = np.random.default_rng(cfg.rng_seed)
    val_set = val_set if val_set is not None and len(val_set) else train_set
    best = TrainResult(model.copy())
    diag = LossDiagnostics()
    n = len(train_set)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = model.loss_and_grads(train_set.subset(idx), cfg.lam, diag)
            if not math.isfinite(loss):
                raise TrainingError(f"training loss diverged at epoch {epoch}")
            for name, g in grads.items():
                model.params[name] -= cfg.learning_rate * g
            total += loss * len(idx)
        val_loss = evaluate(model, val_set, cfg.lam)
        if not math.isfinite(val_loss):
            raise TrainingError(f"validation loss diverged at epoch {epoch}")
        best.curve.append({"epoch": epoch, "train_loss": total / n, "val_loss": val_loss})
        if val_loss < best.best_val_loss:
            best.best_val_loss = val_loss
            best.best_epoch = epoch
            best.model = model.copy()
    if diag.flat_correlation:
        log.info("%d training windows had an undefined correlation term", diag.flat_correlation)
    best.curve[-1]["flat_correlation"] = diag.flat_correlation
    return best


# --- datasets ----------------------------------------------------------------------------


def windows_from_video(video: VideoRecord, L_in: int, L_out: int, stride: int = 1, series=None) -> Batch | None:
    """Sliding (input, target) windows over one video's ground-truth curve."""
    gt = video.gt()
    series = gt if series is None else np.asarray(series, dtype=float)
    frames = video.frame_embeddings()
    starts = list(range(0, len(video) - L_in - L_out + 1, stride))
    if not starts:
        return None
    return Batch(
        np.stack([series[s : s + L_in] for s in starts]),
        np.stack([frames[s : s + L_in] for s in starts]),
        np.repeat(video.text_embedding[None, :], len(starts), axis=0),
        np.stack([gt[s + L_in : s + L_in + L_out] for s in starts]),
    )


def concat_batches(batches: Iterable[Batch | None]) -> Batch:
    batches = [b for b in batches if b is not None]
    if not batches:
        raise ValueError("no windows: videos are shorter than L_in + L_out")
    return Batch(
        np.concatenate([b.series for b in batches]),
        np.concatenate([b.frames for b in batches]),
        np.concatenate([b.text for b in batches]),
        np.concatenate([b.target for b in batches]),
    )


def dataset_from_videos(videos: Sequence[VideoRecord], L_in: int, L_out: int, stride: int = 1) -> Batch:
    return concat_batches(windows_from_video(v, L_in, L_out, stride) for v in videos)


def save_dataset(path: str | Path, batch: Batch):
    with Path(path).open("w") as fh:
        for i in range(len(batch)):
            rec = {
                "series": batch.series[i].tolist(),
                "frame_embeddings": batch.frames[i].tolist(),
                "text_embedding": batch.text[i].tolist(),
                "target": batch.target[i].tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path: str | Path) -> Batch:
    rows = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rows.append(
                    (
                        ForecastInput(rec["series"], rec["frame_embeddings"], rec["text_embedding"]),
                        np.asarray(rec["target"], dtype=float),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad forecast record ({exc})") from exc
    if not rows:
        raise ValueError(f"{path}: empty dataset")
    return Batch.from_inputs([r[0] for r in rows], np.stack([r[1] for r in rows]))


# --- persistence -------------------------------------------------------------------------


def save_model(path: str | Path, model: _Forecaster):
    doc = {
        "format": "saliency-stream-forecaster",
        "version": MODEL_FORMAT_VERSION,
        "hyper": asdict(model.hyper),
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(model.params.items())},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_model(path: str | Path) -> _Forecaster:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "saliency-stream-forecaster" or doc.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"{path}: not a version-{MODEL_FORMAT_VERSION} forecaster file")
    model = build_model(ForecastHyper(**doc["hyper"]))
    for name, entry in doc["params"].items():
        if name not in model.params:
            raise ValueError(f"{path}: unexpected parameter {name!r}")
        model.params[name] = np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
    return model


# --- baselines -------------------------------------------------------------------------------


def persistence_forecast(series: np.ndarray, L_out: int) -> np.ndarray:
    """Repeat the last observed value; the reference any trained model should beat."""
    series = np.atleast_2d(series)
    return np.repeat(series[:, -1:], L_out, axis=1)


def validation_plcc(model: _Forecaster, batch: Batch) -> float:
    """Mean per-window Pearson correlation on clamped predictions (flat windows skipped)."""
    y = model.predict(batch)
    g = batch.target
    vals = []
    for yi, gi in zip(y, g):
        yc, gc = yi - yi.mean(), gi - gi.mean()
        den = math.sqrt(float(yc @ yc) * float(gc @ gc))
        if den > 0:
            vals.append(float(yc @ gc) / den)
    return float(np.mean(vals)) if vals else float("nan")
