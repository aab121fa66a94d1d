"""Run configuration: model, training and data sections, loaded from JSON.

Unknown keys are rejected so a typo never silently falls back to a default.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .data import VOCAB, DataConfig
from .errors import ConfigError


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    enc_layers: int = 3
    dec_layers: int = 3
    points: int = 16
    side: int = 64
    patch: int = 8
    vocab_size: int = len(VOCAB)
    max_len: int = 8
    dropout: float = 0.1
    init: str = "xavier"
    zero_residual: bool = True
    init_sampling: str = "learnable"
    static_sampling: bool = False
    ref_update: str = "absolute"
    visual_pos_embed: str = "sincos"
    visual_stem: str = "two_level"
    visual_context: bool = False
    text_context: bool = False
    l1_reduction: str = "sum"
    dtype: str = "float64"

    @property
    def grid_size(self):
        return self.side // self.patch

    @property
    def n_visual(self):
        return self.grid_size**2


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 5e-4
    lr_encoders: float = 5e-4
    weight_decay: float = 1e-4
    lr_drop_epoch: int = 20
    lr_drop_factor: float = 10.0
    max_grad_norm: float = 1.0
    hflip: bool = True
    seed: int = 42


@dataclass
class DataSection:
    train_count: int = 8000
    val_count: int = 1000
    test_count: int = 1000
    generator: DataConfig = field(default_factory=DataConfig)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)

    def validate(self):
        m, t, d = self.model, self.train, self.data
        if m.side % m.patch:
            raise ConfigError(f"model.side={m.side} is not divisible by model.patch={m.patch}")
        if m.dim % m.heads:
            raise ConfigError(f"model.dim={m.dim} is not divisible by model.heads={m.heads}")
        if m.init_sampling not in ("grid", "uniform", "learnable"):
            raise ConfigError(f"model.init_sampling={m.init_sampling!r} is not grid/uniform/learnable")
        if m.init not in ("xavier", "fan_in"):
            raise ConfigError(f"model.init={m.init!r} is not xavier/fan_in")
        if m.visual_pos_embed not in ("sincos", "normal", "none"):
            raise ConfigError(f"model.visual_pos_embed={m.visual_pos_embed!r} is not sincos/normal/none")
        if m.visual_stem not in ("linear", "two_level"):
            raise ConfigError(f"model.visual_stem={m.visual_stem!r} is not linear/two_level")
        if m.visual_stem == "two_level" and m.patch % 2:
            raise ConfigError(f"model.visual_stem={m.visual_stem} needs an even model.patch, got {m.patch}")
        if m.ref_update not in ("absolute", "delta"):
            raise ConfigError(f"model.ref_update={m.ref_update!r} is not absolute/delta")
        if m.l1_reduction not in ("sum", "mean"):
            raise ConfigError(f"model.l1_reduction={m.l1_reduction!r} is not sum/mean")
        if m.dtype not in ("float64", "float32"):
            raise ConfigError(f"model.dtype={m.dtype!r} is not float64/float32")
        if m.dec_layers < 1 or m.points < 1 or m.enc_layers < 0:
            raise ConfigError("model needs dec_layers >= 1, points >= 1, enc_layers >= 0")
        if m.max_len != d.generator.max_len or m.side != d.generator.side:
            raise ConfigError("model.max_len/side must equal data.generator.max_len/side")
        if m.vocab_size < len(VOCAB):
            raise ConfigError(f"model.vocab_size must be at least {len(VOCAB)}")
        if t.epochs < 1 or t.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        if min(d.train_count, d.val_count, d.test_count) < 1:
            raise ConfigError("data counts must be >= 1")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, raw):
        return _build(cls, raw, "").validate()

    @classmethod
    def load(cls, path):
        with open(path) as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)


def _build(cls, raw, prefix):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        name = f"{prefix}{key}"
        if key not in fields:
            raise ConfigError(f"unknown config key {name!r}")
        ftype = fields[key].type
        sub = _NESTED.get((cls.__name__, key))
        if sub is not None:
            kwargs[key] = _build(sub, value, name + ".")
        else:
            kwargs[key] = _coerce(value, ftype, name)
    return cls(**kwargs)


def _coerce(value, ftype, name):
    if ftype in ("int", int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
    elif ftype in ("float", float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        value = float(value)
    elif ftype in ("bool", bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
    elif ftype in ("str", str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
    return value


_NESTED = {
    ("RunConfig", "model"): ModelConfig,
    ("RunConfig", "train"): TrainConfig,
    ("RunConfig", "data"): DataSection,
    ("DataSection", "generator"): DataConfig,
}
