"""Seeded synthetic videos, embeddings and network traces for desk-scale runs.

Saliency curves are smoothed white noise (correlation length 6-10 chunks). Frame
embeddings are a fixed random projection of local saliency features (current
level, a short look-ahead and the slope) squashed through ``tanh`` plus noise,
so content carries some information about where the curve is heading. The text
embedding encodes video-level statistics the same way.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .model import ChunkRecord, DEFAULT_EMBED_DIM, VideoRecord

_N_FRAME_FEATURES = 5
_N_TEXT_FEATURES = 4
_PROJECTION_SEED = 0x5A11E9C3


def saliency_curve(n_chunks: int, rng: np.random.Generator, corr_chunks: float | None = None) -> np.ndarray:
    """Smooth curve in [0, 1]: Gaussian-filtered white noise, min-max scaled."""
    if corr_chunks is None:
        corr_chunks = rng.uniform(6.0, 10.0)
    pad = int(4 * corr_chunks) + 1
    x = gaussian_filter1d(rng.normal(size=n_chunks + 2 * pad), corr_chunks)[pad : pad + n_chunks]
    if n_chunks > 1:
        x = x + rng.normal(0.0, 0.02 * x.std(), n_chunks)
    lo, hi = x.min(), x.max()
    if hi - lo < 1e-12:
        return np.full(n_chunks, 0.5)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def _projections(embed_dim: int) -> tuple[np.ndarray, np.ndarray]:
    # fixed across videos so the same content maps to the same direction
    rng = np.random.default_rng([_PROJECTION_SEED, embed_dim])
    frame = rng.normal(0.0, 1.0, (_N_FRAME_FEATURES, embed_dim))
    text = rng.normal(0.0, 1.0, (_N_TEXT_FEATURES, embed_dim))
    return frame, text


def frame_features(gt: np.ndarray, lookahead: int = 4) -> np.ndarray:
    n = gt.size
    ahead = np.array([gt[i + 1 : i + 1 + lookahead].mean() if i + 1 < n else gt[i] for i in range(n)])
    slope = np.gradient(gt) if n > 1 else np.zeros(n)
    return np.column_stack([gt - 0.5, ahead - 0.5, 4.0 * slope, ahead - gt, np.ones(n) * 0.1])


def synth_embeddings(gt: np.ndarray, embed_dim: int, rng: np.random.Generator, noise: float = 0.1):
    """Frame embeddings (D x E) and one text embedding (E) derived from a saliency curve."""
    proj_f, proj_t = _projections(embed_dim)
    frames = np.tanh(frame_features(gt) @ proj_f) + rng.normal(0.0, noise, (gt.size, embed_dim))
    stats = np.array([gt.mean() - 0.5, gt.std(), float(np.argmax(gt)) / max(1, gt.size - 1) - 0.5, 0.1])
    text = np.tanh(stats @ proj_t) + rng.normal(0.0, noise, embed_dim)
    return frames, text


def make_video(
    video_id: str,
    gt: np.ndarray,
    rng: np.random.Generator,
    embed_dim: int = DEFAULT_EMBED_DIM,
    duration_s: float = 1.0,
    title: str | None = None,
    frame_embeddings: np.ndarray | None = None,
    text_embedding: np.ndarray | None = None,
) -> VideoRecord:
    gt = np.asarray(gt, dtype=float)
    if frame_embeddings is None or text_embedding is None:
        f, t = synth_embeddings(gt, embed_dim, rng)
        frame_embeddings = f if frame_embeddings is None else frame_embeddings
        text_embedding = t if text_embedding is None else text_embedding
    chunks = tuple(
        ChunkRecord(i, duration_s, float(gt[i]), np.asarray(frame_embeddings[i], dtype=float)) for i in range(gt.size)
    )
    return VideoRecord(video_id, title or f"video {video_id}", chunks, np.asarray(text_embedding, dtype=float))


def synth_video(video_id: str, n_chunks: int, seed: int, embed_dim: int = DEFAULT_EMBED_DIM, duration_s: float = 1.0) -> VideoRecord:
    rng = np.random.default_rng([seed, n_chunks])
    gt = saliency_curve(n_chunks, rng)
    return make_video(video_id, gt, rng, embed_dim, duration_s)


def synth_dataset(n_videos: int, n_chunks: int, seed: int, embed_dim: int = DEFAULT_EMBED_DIM) -> list[VideoRecord]:
    rng = np.random.default_rng(seed)
    out = []
    for v in range(n_videos):
        length = n_chunks if isinstance(n_chunks, int) else int(rng.integers(*n_chunks))
        out.append(synth_video(f"v{v:03d}", length, int(rng.integers(2**31)), embed_dim))
    return out


def synth_trace(duration_s: float, seed: int, mean_kbps: float = 2000.0, step_s: float = 1.0) -> np.ndarray:
    """Log-normal random-walk throughput trace, (timestamp_s, kbps) rows."""
    rng = np.random.default_rng(seed)
    n = max(2, int(np.ceil(duration_s / step_s)))
    log_tp = np.log(mean_kbps) + np.cumsum(rng.normal(0.0, 0.15, n))
    log_tp = np.log(mean_kbps) + 0.8 * (log_tp - log_tp.mean())
    tp = np.clip(np.exp(log_tp), 50.0, None)
    return np.column_stack([np.arange(n) * step_s, tp])
