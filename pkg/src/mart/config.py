"""Configuration dataclasses and the ``key = value`` config-file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

MODEL_KINDS = ("vanilla", "mart", "xl", "xlrg")

PAD, BOS, EOS, UNK = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 64
    n_layers: int = 2
    heads: int = 4
    mem_len: int = 1
    max_video_len: int = 100
    max_text_len: int = 20
    max_segments: int = 6
    vocab_size: int = 64
    d_feat: int = 32
    ffn_size: int = 0  # 0 -> 4 * d
    model_kind: str = "mart"
    cross_step_gradients: bool = True
    recurrence: bool = True
    dropout: float = 0.1
    init_std: float = 0.02
    memory_init: str = "normal"
    tie_embeddings: bool = False
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    @property
    def ffn(self) -> int:
        return self.ffn_size or 4 * self.d

    def validate(self) -> None:
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.d % 2:
            raise ConfigError(f"d={self.d} must be even for sinusoidal positions")
        for name in ("d", "n_layers", "max_video_len", "max_text_len", "max_segments", "vocab_size", "d_feat"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.model_kind == "mart" and self.mem_len < 1:
            raise ConfigError("mart needs mem_len >= 1")
        if self.memory_init not in ("normal", "zeros"):
            raise ConfigError(f"memory_init must be 'normal' or 'zeros', got {self.memory_init!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.vocab_size <= EOS:
            raise ConfigError("vocab_size must cover the special tokens")


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_epochs: int = 5
    max_epochs: int = 50
    batch_size: int = 16
    early_stop_metric: str = "cider"
    patience: int = 5
    clip_norm: float = 1.0
    schedule: str = "constant"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.warmup_epochs > self.max_epochs:
            raise ConfigError("warmup_epochs exceeds max_epochs")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("batch_size/max_epochs must be >= 1 and patience >= 0")
        if self.schedule not in ("constant", "linear"):
            raise ConfigError(f"schedule must be 'constant' or 'linear', got {self.schedule!r}")
        if self.early_stop_metric != "cider":
            raise ConfigError("early stopping is defined on CIDEr-D only")


@dataclass
class DecodeConfig:
    max_text_len: int = 20
    bos: int = BOS
    eos: int = EOS
    pad: int = PAD

    def validate(self, vocab_size: int) -> None:
        if self.max_text_len < 1:
            raise ConfigError("max_text_len must be >= 1")
        ids = (self.bos, self.eos, self.pad)
        if len(set(ids)) != 3 or any(not 0 <= i < vocab_size for i in ids):
            raise ConfigError(f"special ids {ids} must be distinct and inside the vocabulary")


# Keys that live only in run configs (paths and corpus knobs).
_RUN_KEYS: dict[str, type] = {
    "data": str,
    "val_data": str,
    "out": str,
    "min_count": int,
    "n_videos": int,
    "n_val": int,
}

# max_text_len is shared by ModelConfig and DecodeConfig; both read the same key.
_MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_SCHEMA: dict[str, Any] = {}
for _f in list(_MODEL_FIELDS.values()) + list(_TRAIN_FIELDS.values()):
    _SCHEMA[_f.name] = _f.type
_SCHEMA.update({k: v.__name__ for k, v in _RUN_KEYS.items()})


def _coerce(key: str, raw: str):
    kind = _SCHEMA[key]
    kind = kind if isinstance(kind, str) else kind.__name__
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None


@dataclass
class RunConfig:
    """Flat, validated union of model/train/decode settings plus run paths."""

    values: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_lines(cls, lines, base: "RunConfig | None" = None) -> "RunConfig":
        vals = dict(base.values) if base else {}
        for lineno, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            vals[key] = raw
        return cls.from_mapping(vals)

    @classmethod
    def from_file(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_lines(Path(path).read_text(encoding="utf-8").splitlines(), base)

    @classmethod
    def from_mapping(cls, mapping: dict[str, Any]) -> "RunConfig":
        out = {}
        for key, val in mapping.items():
            if key not in _SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            out[key] = _coerce(key, val) if isinstance(val, str) else val
        cfg = cls(out)
        cfg.model()
        cfg.train()
        return cfg

    def override(self, **kw) -> "RunConfig":
        merged = dict(self.values)
        merged.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig.from_mapping(merged)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def model(self, **extra) -> ModelConfig:
        kw = {k: v for k, v in self.values.items() if k in _MODEL_FIELDS}
        kw.update(extra)
        try:
            return ModelConfig(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def train(self) -> TrainConfig:
        return TrainConfig(**{k: v for k, v in self.values.items() if k in _TRAIN_FIELDS})

    def decode(self) -> DecodeConfig:
        return DecodeConfig(max_text_len=self.values.get("max_text_len", 20))


def model_config_to_lines(cfg: ModelConfig) -> list[str]:
    return [f"{k} = {_fmt(v)}" for k, v in dataclasses.asdict(cfg).items()]


def model_config_from_pairs(pairs: dict[str, str]) -> ModelConfig:
    kw = {}
    for key, raw in pairs.items():
        if key in _MODEL_FIELDS:
            kw[key] = _coerce(key, raw)
    return ModelConfig(**kw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def full_scale_config() -> RunConfig:
    """Hyperparameters reported for the full-scale ActivityNet setup."""
    return RunConfig.from_mapping({
        "d": 768, "n_layers": 2, "heads": 12, "mem_len": 1,
        "max_video_len": 100, "max_text_len": 20, "max_segments": 6,
        "base_lr": 1e-4, "beta1": 0.9, "beta2": 0.999, "weight_decay": 0.01,
        "warmup_epochs": 5, "max_epochs": 50, "batch_size": 16, "min_count": 5,
    })


def desk_config() -> RunConfig:
    """Small model and faster schedule for the synthetic corpus on a laptop CPU."""
    return RunConfig.from_mapping({
        "d": 64, "n_layers": 2, "heads": 4, "mem_len": 1,
        "max_video_len": 100, "max_text_len": 20, "max_segments": 6,
        "base_lr": 1e-3, "warmup_epochs": 2, "max_epochs": 30, "batch_size": 16,
        "patience": 5, "min_count": 1,
    })
