"""Run configuration: defaults, ``key=value`` files, named random substreams."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigurationError


def substream(seed: int, name: str) -> np.random.Generator:
    """A generator for ``name`` that is independent of every other name."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


@dataclass
class RunConfig:
    # paths
    data_dir: str = ""
    train_prefix: str = "train"
    valid_prefix: str = "valid"
    test_prefix: str = "test"
    checkpoint: str = ""
    output_dir: str = "runs"
    # vocabulary
    min_freq: int = 1
    # model
    d: int = 256
    layers: int = 3
    dropout: float = 0.3
    hops: int = 2
    latent_dim: int = 0
    max_len: int = 64
    # smoothing
    mode: str = "mweam"
    epsilon: float = 1.0
    tau: float = 0.5
    xi: float = 0.5
    use_reestimated_loss: bool = True
    # training
    max_lr: float = 1e-3
    warmup: int = 200
    max_steps: int = 0
    label_smoothing: float = 0.1
    batch_size: int = 32
    epochs: int = 20
    clip_norm: float = 5.0
    kl_anneal: bool = True
    valid_every: int = 0
    seed: int = 0
    precision: str = "float32"
    # evaluation
    sigmas: str = "0:1:0.1"

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def update(self, values: dict) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigurationError(f"unknown config key {key!r}")
            setattr(self, key, _coerce(key, types[key], raw))
        return self

    def to_text(self) -> str:
        return "".join(f"{f.name}={_show(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls().update(parse_kv(text))

    def model_config(self, src_vocab: int, tgt_vocab: int):
        from .model import ModelConfig

        return ModelConfig(
            src_vocab, tgt_vocab, self.d, self.layers, self.dropout, self.hops, self.latent_dim or None, self.max_len
        )

    def smoothing_config(self):
        from .smoothing import SmoothingConfig

        return SmoothingConfig(self.mode, self.epsilon, self.tau, self.xi, self.use_reestimated_loss)

    def train_config(self):
        from .training import TrainConfig

        return TrainConfig(
            max_lr=self.max_lr,
            warmup=self.warmup,
            max_steps=self.max_steps or None,
            label_smoothing=self.label_smoothing,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            clip_norm=self.clip_norm,
            kl_anneal=self.kl_anneal,
            valid_every=self.valid_every,
            smoothing=self.smoothing_config(),
        )


def _show(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(key: str, typ, raw):
    if not isinstance(raw, str):
        return raw
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {raw!r} as {typ}") from None
    return raw.strip()


def parse_kv(text: str) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
