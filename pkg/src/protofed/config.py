"""Experiment configuration: defaults, file parsing, overrides, validation.

Defaults follow the cross-silo recipe (20 clients, full participation,
5 local epochs, lambda 7, 20 server epochs, prefix length 10, 3 prompts per
class) with desk-scale sizes for rounds, feature width, and batch size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

METHODS = ("fedtsp", "fedproto", "fedtgp", "alignfed", "local", "fedavg")
MODES = ("htfl", "gfl", "pfl")

# per-method alignment-weight defaults, applied when the config leaves lambda unset
_LAMBDA_DEFAULTS = {"fedtsp": 7.0, "fedproto": 1.0, "fedtgp": 1.0,
                    "alignfed": 0.0, "local": 0.0, "fedavg": 0.0}


@dataclass
class ExperimentConfig:
    method: str = "fedtsp"
    mode: str = "htfl"
    seed: int = 0
    num_clients: int = 20
    rounds: int = 50
    local_epochs: int = 5
    server_epochs: int = 20
    lambda_: float | None = None
    tau: float = 0.07
    prompt_len: int = 10
    prompts_per_class: int = 3
    alpha: float = 0.5
    participation_rate: float = 1.0
    client_lr: float = 0.01
    prompt_lr: float = 0.01
    batch_size: int = 32
    feature_dim: int = 32
    embed_dim: int = 16
    vocab_size: int = 4096
    encoder_hidden: int = 32
    superclusters: int = 2
    classes_per_super: int = 3
    samples_per_class: int = 40
    input_dim: int = 16
    sigma_super: float = 2.0
    sigma_class: float = 0.6
    holdout_per_class: int = 10
    architectures: list[list[int]] = field(default_factory=lambda: [[32], [48], [64, 32]])
    activation: str = "relu"
    margin: float = 100.0
    alignfed_lambda_start: float = 20.0
    alignfed_lambda_end: float = 2.0
    finetune_epochs: int = 20
    finetune_lr: float = 0.01
    dataset_path: str | None = None
    embedding_path: str | None = None
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(
                f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}"
            )
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; valid modes: {', '.join(MODES)}")
        positive = {
            "num_clients": self.num_clients,
            "tau": self.tau,
            "prompts_per_class": self.prompts_per_class,
            "alpha": self.alpha,
            "client_lr": self.client_lr,
            "batch_size": self.batch_size,
            "feature_dim": self.feature_dim,
            "embed_dim": self.embed_dim,
            "vocab_size": self.vocab_size,
            "encoder_hidden": self.encoder_hidden,
            "superclusters": self.superclusters,
            "classes_per_super": self.classes_per_super,
            "samples_per_class": self.samples_per_class,
            "sigma_super": self.sigma_super,
            "sigma_class": self.sigma_class,
            "holdout_per_class": self.holdout_per_class,
            "margin": self.margin,
            "threads": self.threads,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"config field '{name}' must be positive, got {value}")
        nonnegative = {
            "rounds": self.rounds,
            "local_epochs": self.local_epochs,
            "server_epochs": self.server_epochs,
            "prompt_len": self.prompt_len,
            "prompt_lr": self.prompt_lr,
            "finetune_epochs": self.finetune_epochs,
            "finetune_lr": self.finetune_lr,
            "seed": self.seed,
        }
        for name, value in nonnegative.items():
            if value < 0:
                raise ConfigError(f"config field '{name}' must be >= 0, got {value}")
        if self.lambda_ is not None and self.lambda_ < 0:
            raise ConfigError(f"config field 'lambda' must be >= 0, got {self.lambda_}")
        if not 0.0 < self.participation_rate <= 1.0:
            raise ConfigError(
                f"participation_rate must lie in (0, 1], got {self.participation_rate}"
            )
        if self.input_dim < 2:
            raise ConfigError(f"input_dim must be >= 2, got {self.input_dim}")
        if not self.architectures or any(
            not isinstance(widths, list) for widths in self.architectures
        ):
            raise ConfigError("architectures must be a nonempty list of width lists")
        if self.mode in ("gfl", "pfl") and len(self.architectures) != 1:
            raise ConfigError(
                f"mode '{self.mode}' needs homogeneous architectures (one family entry), "
                f"got {len(self.architectures)}"
            )
        if self.method == "fedavg" and self.mode == "htfl":
            raise ConfigError("method 'fedavg' aggregates models; use mode 'gfl' or 'pfl'")

    @property
    def resolved_lambda(self) -> float:
        if self.lambda_ is not None:
            return float(self.lambda_)
        return _LAMBDA_DEFAULTS[self.method]

    @property
    def num_classes(self) -> int:
        return self.superclusters * self.classes_per_super

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            key = "lambda" if f.name == "lambda_" else f.name
            out[key] = getattr(self, f.name)
        out["lambda"] = self.resolved_lambda
        return out


_FIELD_BY_KEY = {("lambda" if f.name == "lambda_" else f.name): f for f in fields(ExperimentConfig)}


def _coerce(key: str, value: Any) -> Any:
    """Coerce a JSON/override value to the field's declared type."""
    f = _FIELD_BY_KEY[key]
    attr = f.name
    if value is None:
        if attr in ("lambda_", "dataset_path", "embedding_path"):
            return None
        raise ConfigError(f"config field '{key}' cannot be null")
    if attr == "architectures":
        if not isinstance(value, list):
            raise ConfigError("config field 'architectures' must be a list of width lists")
        return [[int(w) for w in widths] for widths in value]
    if attr in ("method", "mode", "activation", "dataset_path", "embedding_path"):
        return str(value)
    if attr in ("lambda_", "tau", "alpha", "participation_rate", "client_lr", "prompt_lr",
                "sigma_super", "sigma_class", "margin", "alignfed_lambda_start",
                "alignfed_lambda_end", "finetune_lr"):
        return float(value)
    return int(value)


def config_from_dict(raw: dict[str, Any], source: str = "config") -> ExperimentConfig:
    kwargs = {}
    for key, value in raw.items():
        if key not in _FIELD_BY_KEY:
            raise ConfigError(f"{source}: unknown config key '{key}'")
        kwargs[_FIELD_BY_KEY[key].name] = _coerce(key, value)
    return ExperimentConfig(**kwargs)


def apply_overrides(raw: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply repeatable KEY=VALUE overrides on top of a raw config dict."""
    out = dict(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not KEY=VALUE")
        key, _, text = item.partition("=")
        key = key.strip()
        if key not in _FIELD_BY_KEY:
            raise ConfigError(f"override: unknown config key '{key}'")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        out[key] = value
    return out


def parse_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Load a JSON config file (defaults for every omitted key), apply overrides."""
    raw: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a JSON object")
    raw = apply_overrides(raw, overrides or [])
    return config_from_dict(raw, source=str(path) if path else "overrides")
