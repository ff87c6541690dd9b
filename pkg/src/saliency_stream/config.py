"""Experiment configuration read from an INI file.

Sections: ``[experiment]``, ``[data]``, ``[oracle]``, ``[ranking]``,
``[forecast]``, ``[live]`` and ``[abr]``. Unknown keys are rejected so typos
surface early. Credentials never live here: the HTTP oracle names the
environment variable holding its key.
"""
from __future__ import annotations

import configparser
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


_SECRET_KEYS = {"api_key", "apikey", "token", "secret", "password"}


@dataclass
class ExperimentConfig:
    # [experiment]
    mode: str = "vod"
    rng_seed: int = 0
    out_dir: str = "out"
    workers: int = 1
    # [data]
    dataset: str = ""
    traces: list[str] = field(default_factory=list)
    synth_videos: int = 6
    synth_chunks: int = 120
    predictions: str = ""
    # [oracle]
    oracle: str = "mock"
    window_bias_amplitude: float = 0.3
    rating_noise_std: float = 0.0
    comparator_swap_prob: float = 0.0
    latency_mean_s: float = 9.83
    latency_std_s: float = 0.83
    endpoint: str = ""
    model_name: str = "gpt-4o"
    api_key_env: str = "OPENAI_API_KEY"
    timeout_s: float = 120.0
    cache: str = ""
    # [ranking]
    m: int = 10
    sigma: float = 5.0
    kernel_size: int = 0  # 0 means the video length
    # [forecast]
    lam: float = 1.0
    embed_dim: int = 64
    d_model: int = 32
    heads: int = 4
    kind: str = "multimodal"
    epochs: int = 60
    learning_rate: float = 0.05
    batch_size: int = 32
    stride: int = 1
    pretrained_outputs: list[int] = field(default_factory=list)
    model_dir: str = ""
    forecaster: str = "model"
    # [live]
    d: float = 1.0
    N: int = 5
    forecast_latency_est_s: float = 1.35
    forecast_latency_std_s: float = 0.0
    ewma_alpha: float = 0.3
    # [abr]
    ladder_kbps: list[int] = field(default_factory=lambda: [300, 750, 1200, 1850, 2850, 4300])
    rebuffer_penalty: float = 4.3
    smoothness_penalty: float = 1.0
    quality_map: str = "linear"
    weight_scope: str = "all"
    buffer_cap_s: float = 60.0
    trace_seconds: float = 600.0
    trace_mean_kbps: float = 2000.0
    n_traces: int = 4

    def __post_init__(self):
        self.validate()

    @property
    def outputs(self) -> list[int]:
        return self.pretrained_outputs or [self.m, 2 * self.m, 3 * self.m]

    def validate(self):
        if self.mode not in ("vod", "live", "train", "metrics"):
            raise ConfigError(f"mode must be vod, live, train or metrics, got {self.mode!r}")
        if self.oracle not in ("mock", "http"):
            raise ConfigError(f"oracle must be mock or http, got {self.oracle!r}")
        if self.oracle == "http" and not self.endpoint:
            raise ConfigError("http oracle needs an endpoint")
        if self.forecaster not in ("model", "persistence", "none"):
            raise ConfigError(f"forecaster must be model, persistence or none, got {self.forecaster!r}")
        checks = [
            (self.m >= 2, "m must be >= 2"),
            (self.workers >= 1, "workers must be >= 1"),
            (self.sigma > 0, "sigma must be > 0"),
            (self.kernel_size >= 0, "kernel_size must be >= 0"),
            (self.lam >= 0, "lam must be >= 0"),
            (self.d > 0, "d must be > 0"),
            (self.N >= 1, "N must be >= 1"),
            (self.embed_dim >= 1, "embed_dim must be >= 1"),
            (self.stride >= 1, "stride must be >= 1"),
            (self.epochs >= 1 and self.learning_rate > 0 and self.batch_size >= 1, "training settings must be positive"),
            (self.synth_videos >= 1 and self.synth_chunks >= 2, "synthetic dataset too small"),
            (self.n_traces >= 1 and self.trace_seconds > 0 and self.trace_mean_kbps > 0, "trace settings must be positive"),
            (all(b > a for a, b in zip(self.outputs, self.outputs[1:])), "pretrained_outputs must be strictly ascending"),
            (all(v >= 1 for v in self.outputs), "pretrained_outputs must be positive"),
            (0 <= self.comparator_swap_prob < 0.5, "comparator_swap_prob must be in [0, 0.5)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        for path in [self.dataset, *self.traces]:
            if path and not Path(path).exists():
                raise ConfigError(f"file not found: {path}")


_LIST_FIELDS = {"traces": str, "pretrained_outputs": int, "ladder_kbps": int}


def _coerce(name: str, raw: str, default):
    try:
        if name in _LIST_FIELDS:
            return [_LIST_FIELDS[name](v.strip()) for v in raw.split(",") if v.strip()]
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


# ini key -> dataclass field, where they differ
_ALIASES = {"seed": "rng_seed", "model": "model_name"}


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """Read ``path`` (if given) then apply non-None ``overrides``."""
    defaults = {f.name: (f.default if f.default_factory is MISSING else f.default_factory())
                for f in fields(ExperimentConfig)}
    values: dict = {}
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys are case-sensitive (N vs n)
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key.lower() in _SECRET_KEYS:
                    raise ConfigError(f"[{section}] {key}: credentials belong in an environment variable (see api_key_env)")
                name = _ALIASES.get(key, key)
                if name not in defaults:
                    raise ConfigError(f"[{section}] unknown key {key!r}")
                values[name] = _coerce(name, raw, defaults[name])
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
