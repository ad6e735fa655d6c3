"""Run configuration: defaults, validation, JSON loading and fingerprinting."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

ABLATIONS = ("disc_only", "hg_only", "avg_heads", "full_hyda")
BACKENDS = ("hypergraph", "graph")


@dataclass(frozen=True)
class Schedule:
    warmup_epochs: int = 3
    decay_epoch: int = 6
    decay_gamma: float = 0.5
    early_stop_patience: int = 7

    def lr_at(self, base_lr: float, epoch: int) -> float:
        lr = base_lr
        if self.warmup_epochs > 0 and epoch < self.warmup_epochs:
            lr *= (epoch + 1) / self.warmup_epochs
        if epoch >= self.decay_epoch:
            lr *= self.decay_gamma
        return lr


@dataclass(frozen=True)
class RunConfig:
    k: int = 20
    C: int = 54
    C_hid: int | None = None  # must match the feature-map channels when given
    C_out: int = 8
    C_res: int | None = None  # must equal E_m / (D*H*W) when given
    tab_embed_dim: int = 16
    lr: float = 1e-3
    weight_decay_hg: float = 0.01
    dropout_p: float = 0.5
    batch_size: int = 30
    epochs: int = 100
    folds: int = 5
    focal_gamma: float = 2.0
    focal_alpha: float | tuple | None = None
    seed: int = 0
    modalities: tuple | None = None
    backend: str = "hypergraph"
    ablation: str = "full_hyda"
    schedule: Schedule | None = None
    zero_fusion_init: bool = False

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", _build(Schedule, self.schedule, "schedule"))
        if isinstance(self.modalities, list):
            object.__setattr__(self, "modalities", tuple(self.modalities))
        if isinstance(self.focal_alpha, list):
            object.__setattr__(self, "focal_alpha", tuple(self.focal_alpha))
        self.validate()

    def validate(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.k > self.batch_size:
            raise ConfigError(f"k={self.k} exceeds batch_size={self.batch_size}")
        if self.ablation == "full_hyda" and self.C % 27:
            raise ConfigError(f"C={self.C} must be divisible by 27 for full_hyda")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.lr <= 0 or self.weight_decay_hg < 0 or self.focal_gamma < 0:
            raise ConfigError("lr must be > 0; weight_decay_hg and focal_gamma must be >= 0")
        if self.epochs < 1 or self.folds < 2 or self.C < 1 or self.C_out < 1 or self.tab_embed_dim < 1:
            raise ConfigError("epochs, C, C_out, tab_embed_dim must be >= 1 and folds >= 2")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        for key in ("modalities", "focal_alpha"):
            if isinstance(d[key], tuple):
                d[key] = list(d[key])
        return d

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        return _build(cls, d, "config")


def _build(cls, d, what):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be a key/value object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {unknown}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"bad {what}: {e}") from None


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"config file {path} is not valid UTF-8 JSON: {e}") from None
    return RunConfig.from_dict(d)


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True), encoding="utf-8")


# Two reference protocols: the cohort-scale defaults (k=20, lr 1e-3, batch 30, 5 folds)
# and the scheduled variant (k=16, lr 1e-4, batch 20, 25 epochs, warmup/decay/early stop).
PROGRESSION_PROTOCOL = RunConfig(k=20, lr=1e-3, batch_size=30, weight_decay_hg=0.01, dropout_p=0.5, folds=5)
SCHEDULED_PROTOCOL = RunConfig(k=16, lr=1e-4, batch_size=20, epochs=25, folds=5,
                               schedule=Schedule(warmup_epochs=3, decay_epoch=6, decay_gamma=0.5,
                                                 early_stop_patience=7))
