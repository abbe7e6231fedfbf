"""Run configuration: strict keys, JSON round-trip, dotted overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

MODALITY_NAMES = ("structure", "relation", "attribute", "name", "visual")

_TRUE = {"true", "on", "yes", "1"}
_FALSE = {"false", "off", "no", "0"}


class ConfigError(ValueError):
    pass


@dataclass
class IterativeConfig:
    """Pseudo-seed expansion schedule: from start_epoch on, propose
    mutual nearest neighbours every `every` epochs and admit pairs
    proposed in confirm_rounds consecutive rounds."""

    enabled: bool = True
    start_epoch: int = 200
    every: int = 50
    confirm_rounds: int = 2


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 1000
    batch_size: int = 512
    lr: float = 5e-4
    weight_decay: float = 0.01
    dropout: float = 0.0
    tau_contrastive: float = 0.1
    tau_distill: float = 4.0
    struct_dim: int = 300
    modal_dim: int = 100
    heads: int = 2
    bigram_dim: int = 512
    img_dim: int = 100
    train_ratio: float = 0.3
    dev_fraction: float = 0.1
    eval_every: int = 10
    patience: int = 5
    modalities: tuple = MODALITY_NAMES
    modal_contrastive: bool = True
    distill: bool = True
    adaptive_weights: bool = True
    iterative: IterativeConfig = field(default_factory=IterativeConfig)
    unsupervised_mode: str = "off"
    max_seeds: int = 4000
    direction: str = "both"
    candidates: str = "test"

    def validate(self) -> "RunConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        for key in ("lr", "tau_contrastive", "tau_distill"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        for key in ("struct_dim", "modal_dim", "heads", "bigram_dim", "img_dim",
                    "eval_every", "max_seeds"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if not 0.0 < self.train_ratio <= 1.0:
            raise ConfigError("train_ratio must be in (0, 1]")
        if not 0.0 <= self.dev_fraction < 1.0:
            raise ConfigError("dev_fraction must be in [0, 1)")
        if not self.modalities:
            raise ConfigError("at least one modality must be enabled")
        for m in self.modalities:
            if m not in MODALITY_NAMES:
                raise ConfigError(f"unknown modality: {m!r}")
        if self.unsupervised_mode not in ("off", "name", "visual"):
            raise ConfigError("unsupervised_mode must be off, name or visual")
        if self.direction not in ("1to2", "2to1", "both"):
            raise ConfigError("direction must be 1to2, 2to1 or both")
        if self.candidates not in ("test", "all"):
            raise ConfigError("candidates must be test or all")
        it = self.iterative
        if it.start_epoch < 1 or it.every < 1 or it.confirm_rounds < 1:
            raise ConfigError("iterative schedule fields must be >= 1")
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["modalities"] = list(self.modalities)
        return out


def config_from_dict(data: dict) -> RunConfig:
    known = {f.name: f for f in dataclasses.fields(RunConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {key!r}")
        if key == "iterative":
            if not isinstance(value, dict):
                raise ConfigError("iterative must be a mapping")
            it_known = {f.name for f in dataclasses.fields(IterativeConfig)}
            for sub in value:
                if sub not in it_known:
                    raise ConfigError(f"unknown config key: iterative.{sub!r}")
            kwargs[key] = IterativeConfig(**value)
        elif key == "modalities":
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs).validate()


def _coerce(key: str, text: str, current) -> object:
    if isinstance(current, bool):
        low = text.strip().lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(current, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if isinstance(current, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    if isinstance(current, tuple):
        return tuple(part.strip() for part in text.split(",") if part.strip())
    return text


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    """Apply "key=value" or "iterative.key=value" strings in place."""
    for raw in pairs:
        if "=" not in raw:
            raise ConfigError(f"override must look like key=value, got {raw!r}")
        key, text = raw.split("=", 1)
        key = key.strip()
        target = cfg
        if key.startswith("iterative."):
            target = cfg.iterative
            key = key[len("iterative."):]
        if not hasattr(target, key) or key == "iterative":
            raise ConfigError(f"unknown config key: {raw.split('=', 1)[0]!r}")
        setattr(target, key, _coerce(key, text, getattr(target, key)))
    return cfg.validate()
