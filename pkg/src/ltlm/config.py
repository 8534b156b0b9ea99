"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from typing import Iterable, Mapping

from .decoder import DecodeConfig
from .errors import ConfigError
from .lattice import ScoreWeights
from .model import LtLmConfig, TrainSchedule
from .world import WorldConfig

ENV_CONFIG = "LTLM_CONFIG"


@dataclass
class ExperimentConfig:
    seed: int = 0
    # world; an empty world_dir means the bundled fixture
    world_dir: str = ""
    num_classes: int = 24
    leak: float = 0.45
    background: float = 0.02
    frame_concentration: float = 4.0
    train_sentences: int = 2000
    eval_sentences: int = 200
    labeled_sentences: int = 300
    # lattice generation
    ngram_order: int = 3
    # wider than the decoder defaults so the toy lattices carry enough distinct hypotheses
    lattice_beam: float = 20.0
    max_active: int = 200
    prune_beam: float = 20.0
    kappa: float = 4.0
    mix_real: bool = True
    # lattice model
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    max_positions: int = 256
    dropout: float = 0.1
    epochs: int = 6
    batch_size: int = 16
    lr: float = 8e-3
    warmup: int = 100
    # baseline causal LM
    ar_d_model: int = 64
    ar_layers: int = 2
    ar_epochs: int = 6
    # rescoring
    a: float = 1.0
    l1: float = 1.0
    l2: float = 0.8
    nbest: int = 50
    rescore_batch: int = 1

    def validate(self) -> None:
        if self.d_model % self.heads or self.ar_d_model % self.heads:
            raise ConfigError("model dims must be divisible by heads")
        for name in ("epochs", "batch_size", "nbest", "rescore_batch", "max_active", "ngram_order"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.world_dir and not os.path.isdir(self.world_dir):
            raise ConfigError(f"world_dir {self.world_dir!r} does not exist")

    def world_config(self) -> WorldConfig:
        return WorldConfig(
            num_classes=self.num_classes, leak=self.leak, background=self.background,
            frame_concentration=self.frame_concentration, train_sentences=self.train_sentences,
            eval_sentences=self.eval_sentences, labeled_sentences=self.labeled_sentences, seed=self.seed,
        )

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(self.lattice_beam, self.max_active, self.prune_beam, ScoreWeights(self.a, self.l1, 0.0))

    def weights(self) -> ScoreWeights:
        return ScoreWeights(self.a, self.l1, self.l2)

    def ltlm_config(self, vocab_size: int) -> LtLmConfig:
        return LtLmConfig(vocab_size, self.d_model, self.layers, self.heads, self.ff_dim, self.max_positions, self.dropout, self.seed)

    def arlm_config(self, vocab_size: int) -> LtLmConfig:
        return LtLmConfig(vocab_size, self.ar_d_model, self.ar_layers, self.heads, 2 * self.ar_d_model, 64, self.dropout, self.seed)

    def schedule(self, epochs: int | None = None) -> TrainSchedule:
        return TrainSchedule(epochs or self.epochs, self.batch_size, self.lr, self.warmup, 1.0, self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key: str, raw):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELDS[key].type
    if isinstance(raw, str):
        try:
            value = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            value = raw
    else:
        value = raw
    try:
        if kind == "bool":
            if isinstance(value, str):
                value = value.lower() in ("1", "true", "yes", "on")
            return bool(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def parse_config(text: str, overrides: Mapping[str, object] | None = None) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"config line {lineno}: expected key = value")
        values[key.strip()] = _coerce(key.strip(), val.strip())
    for key, val in (overrides or {}).items():
        values[key] = _coerce(key, val)
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def load_config(path: str | None = None, overrides: Mapping[str, object] | None = None) -> ExperimentConfig:
    """Read ``path`` (or ``$LTLM_CONFIG``); flags in ``overrides`` win over the file."""
    path = path or os.environ.get(ENV_CONFIG)
    text = ""
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = val.strip()
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in cfg.to_dict().items())
