"""Configuration records and their canonical JSON form.

Every record is a frozen dataclass. ``RunConfig`` bundles them and is the
unit that gets written to config files and checkpoint headers.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError

FLAVORS = ("v5", "v9")
DTYPES = ("float32", "float64")


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    flavor: str = "v5"
    residual_units: int = 8
    metric_gated_size: int = 170
    metric_linear_size: int = 64
    rope_base: float = 10000.0
    ln_eps: float = 1e-5
    power_floor: float = 1e-12
    init_std: float = 0.02

    def __post_init__(self):
        if self.n_heads <= 0 or self.d_model <= 0:
            raise ConfigError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model ({self.d_model}) must equal n_heads ({self.n_heads}) * d_k")
        if self.flavor not in FLAVORS:
            raise ConfigError(f"flavor must be one of {FLAVORS}, got {self.flavor!r}")
        if self.d_k % 2:
            raise ConfigError(f"rotary embeddings need an even d_k, got {self.d_k}")
        if self.flavor == "v5" and self.metric_linear_size != self.d_k:
            raise ConfigError(
                f"flavor v5 requires metric_linear_size == d_k ({self.metric_linear_size} != {self.d_k})"
            )

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_heads: int
    n_layers: int
    vocab_size: int = 32000
    context_length: int = 1024
    flavor: str = "v5"
    residual_units: int = 8
    # None -> flavor default: v5 floor(8/3 d_k):d_k, v9 300:112
    metric_gated_size: Optional[int] = None
    metric_linear_size: Optional[int] = None
    # None -> floor(2/3 * 4 * d_model)
    ffn_gated_size: Optional[int] = None
    rope_base: float = 10000.0
    pad_id: int = 0
    end_id: int = 1
    ln_eps: float = 1e-5
    power_floor: float = 1e-12

    def __post_init__(self):
        if self.n_layers <= 0:
            raise ConfigError("n_layers must be positive")
        if self.vocab_size <= 0:
            raise ConfigError("vocab_size must be positive")
        for name in ("pad_id", "end_id"):
            v = getattr(self, name)
            if not 0 <= v < self.vocab_size:
                raise ConfigError(f"{name}={v} outside vocabulary of size {self.vocab_size}")
        if self.context_length < 2:
            raise ConfigError("context_length must be >= 2")
        if self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model ({self.d_model}) must equal n_heads ({self.n_heads}) * d_k")
        d_k = self.d_model // self.n_heads
        if self.metric_gated_size is None:
            object.__setattr__(self, "metric_gated_size", (8 * d_k) // 3 if self.flavor == "v5" else 300)
        if self.metric_linear_size is None:
            object.__setattr__(self, "metric_linear_size", d_k if self.flavor == "v5" else 112)
        if self.ffn_gated_size is None:
            object.__setattr__(self, "ffn_gated_size", (8 * self.d_model) // 3)
        self.attention  # validates the attention half

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def init_std(self) -> float:
        return 0.02 / math.sqrt(2 * self.n_layers)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            flavor=self.flavor,
            residual_units=self.residual_units,
            metric_gated_size=self.metric_gated_size,
            metric_linear_size=self.metric_linear_size,
            rope_base=self.rope_base,
            ln_eps=self.ln_eps,
            power_floor=self.power_floor,
            init_std=self.init_std,
        )


@dataclass(frozen=True)
class OptimizerConfig:
    max_lr: float = 1e-3
    warmup_steps: int = 2000
    total_steps: int = 250_000
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-5
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    final_lr_fraction: float = 0.1
    # gradient accumulation; 2 stands in for the two-rank data-parallel setup
    micro_batches: int = 1

    def __post_init__(self):
        if not 0 < self.final_lr_fraction <= 1:
            raise ConfigError("final_lr_fraction must lie in (0, 1]")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(
                f"warmup_steps ({self.warmup_steps}) must be < total_steps ({self.total_steps})"
            )
        if self.micro_batches < 1:
            raise ConfigError("micro_batches must be >= 1")


@dataclass(frozen=True)
class DagCoefficients:
    """Regularization strengths; ``None`` means the term is off (not evaluated)."""

    lambda1: Optional[float] = None
    lambda2: Optional[float] = None
    lambda3: Optional[float] = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and (not math.isfinite(v) or v < 0):
                raise ConfigError(f"dag.{f.name} must be a non-negative number or null, got {v!r}")

    def as_tuple(self) -> tuple:
        return (self.lambda1, self.lambda2, self.lambda3)

    @property
    def any_on(self) -> bool:
        return any(v is not None for v in self.as_tuple())


@dataclass(frozen=True)
class DataConfig:
    train_path: Optional[str] = None
    val_path: Optional[str] = None
    # "byte" for the built-in byte tokenizer, or a path to a vocabulary file
    tokenizer: str = "byte"
    batch_size: int = 16
    epochs: int = 1
    digit_split: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("data.batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("data.epochs must be >= 1")


@dataclass(frozen=True)
class TelemetryConfig:
    log_every: int = 2000
    val_every: int = 12000
    val_batches: int = 2000
    # multiplies the three cadences above for desk-scale runs
    telemetry_scale: float = 1.0

    def _scaled(self, v: int) -> int:
        return max(1, int(round(v * self.telemetry_scale)))

    @property
    def log_interval(self) -> int:
        return self._scaled(self.log_every)

    @property
    def val_interval(self) -> int:
        return self._scaled(self.val_every)

    @property
    def val_batch_count(self) -> int:
        return self._scaled(self.val_batches)


@dataclass(frozen=True)
class GenerationParams:
    strategy: str = "top_p"  # greedy | top_k | top_p
    top_k: int = 1
    top_p: float = 0.8
    max_new_tokens: int = 256
    stop_id: Optional[int] = None  # None -> model end_id

    def __post_init__(self):
        if self.strategy not in ("greedy", "top_k", "top_p"):
            raise ConfigError(f"unknown generation strategy {self.strategy!r}")
        if not (0 < self.top_p <= 1):
            raise ConfigError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.max_new_tokens < 0:
            raise ConfigError("max_new_tokens must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    dag: DagCoefficients = field(default_factory=DagCoefficients)
    data: DataConfig = field(default_factory=DataConfig)
    telemetry: TelemetryConfig = field(default_factory=TelemetryConfig)
    generation: GenerationParams = field(default_factory=GenerationParams)
    seed: int = 0
    dtype: str = "float32"
    model_id: str = "pldr-llm"

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {DTYPES}, got {self.dtype!r}")

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_NESTED = {
    "model": ModelConfig,
    "optimizer": OptimizerConfig,
    "dag": DagCoefficients,
    "data": DataConfig,
    "telemetry": TelemetryConfig,
    "generation": GenerationParams,
}


def _build(cls, d: Any, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    for key in d:
        if key not in known:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
    kwargs = {}
    for key, value in d.items():
        if cls is RunConfig and key in _NESTED:
            value = _build(_NESTED[key], value, f"{key}.")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{prefix or 'config'}: {e}") from None


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def diff_configs(a: dict, b: dict, prefix: str = "") -> list[str]:
    """Dotted names of fields whose values differ between two config dicts."""
    out = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            out.extend(diff_configs(va, vb, f"{prefix}{key}."))
        elif va != vb:
            out.append(f"{prefix}{key}")
    return out
