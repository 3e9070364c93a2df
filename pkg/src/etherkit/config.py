"""Flat ``key = value`` experiment configuration with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Any, Mapping

from .adapters import METHODS
from .errors import ConfigurationError
from .harness import DEFAULT_LR_GRID, DEFAULT_UNIT_LR, OPTIMIZERS, REFERENCE_EPOCHS, REFERENCE_TRAIN, TaskSpec

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_list(text: str, item) -> tuple:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a non-empty comma-separated list")
    return tuple(item(p) for p in parts)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


@dataclass
class ExperimentConfig:
    method: str = "ether_plus"
    methods: tuple = METHODS
    n: int = 1
    r: int = 4
    two_sided: bool = True
    lr: float = 0.01
    lr_grid: tuple = DEFAULT_LR_GRID
    epochs: int = REFERENCE_EPOCHS
    seed: int = 0
    optimizer: str = REFERENCE_TRAIN["optimizer"]
    batch_size: int = REFERENCE_TRAIN["batch_size"]
    cosine: bool = REFERENCE_TRAIN["cosine"]
    weight_decay: float = REFERENCE_TRAIN["weight_decay"]
    he_power: float = 1.0
    strengths: tuple = (0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 8.0)
    n_grid: tuple = (1, 4, 16)
    threads: int = 1
    out: str = ""
    checkpoint: str = ""
    # task
    kind: str = TaskSpec.kind
    input_dim: int = TaskSpec.input_dim
    hidden_dim: int = TaskSpec.hidden_dim
    output_dim: int = TaskSpec.output_dim
    n_pretrain: int = TaskSpec.n_pretrain
    n_finetune: int = TaskSpec.n_finetune
    pretrain_seed: int = TaskSpec.pretrain_seed
    shift_seed: int = TaskSpec.shift_seed
    shift_magnitude: float = TaskSpec.shift_magnitude
    bias_offset: float = TaskSpec.bias_offset
    input_floor: float = TaskSpec.input_floor
    # per-method lr unit scales, keys ``unit_lr_<method>``
    unit_lr: dict = field(default_factory=lambda: dict(DEFAULT_UNIT_LR))

    def validate(self) -> "ExperimentConfig":
        for m in (self.method, *self.methods):
            if m not in METHODS:
                raise ConfigurationError(f"unknown method {m!r}; expected one of {', '.join(METHODS)}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        for name in ("n", "r", "epochs", "batch_size", "threads"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.lr < 0 or any(v <= 0 for v in self.lr_grid) or any(v <= 0 for v in self.unit_lr.values()):
            raise ConfigurationError("learning rates must be positive")
        if any(s < 0 for s in self.strengths):
            raise ConfigurationError("perturbation strengths must be non-negative")
        if any(k < 1 for k in self.n_grid):
            raise ConfigurationError("block counts must be at least 1")
        self.task()
        return self

    def task(self) -> TaskSpec:
        names = [f.name for f in fields(TaskSpec)]
        return TaskSpec(**{k: getattr(self, k) for k in names})

    def train_kwargs(self) -> dict:
        return {"optimizer": self.optimizer, "batch_size": self.batch_size, "cosine": self.cosine,
                "weight_decay": self.weight_decay, "he_power": self.he_power}

    def items(self) -> list[tuple[str, str]]:
        """Effective settings as (key, text) pairs in a fixed order."""
        out = []
        for f in fields(self):
            if f.name == "unit_lr":
                out.extend((f"unit_lr_{m}", _fmt(float(self.unit_lr[m]))) for m in METHODS)
            else:
                out.append((f.name, _fmt(getattr(self, f.name))))
        return out

    def echo(self, command: str) -> list[str]:
        return [f"# command={command}"] + [f"# {k}={v}" for k, v in self.items()]


def _converters() -> dict[str, Any]:
    conv = {}
    for f in fields(ExperimentConfig):
        default = f.default if f.default is not dataclasses.MISSING else None
        if f.name == "unit_lr":
            continue
        if f.name in ("methods",):
            conv[f.name] = lambda t: _parse_list(t, str)
        elif f.name in ("lr_grid", "strengths"):
            conv[f.name] = lambda t: _parse_list(t, float)
        elif f.name == "n_grid":
            conv[f.name] = lambda t: _parse_list(t, int)
        elif isinstance(default, bool):
            conv[f.name] = parse_bool
        elif isinstance(default, int):
            conv[f.name] = int
        elif isinstance(default, float):
            conv[f.name] = float
        else:
            conv[f.name] = lambda t: t
    for m in METHODS:
        conv[f"unit_lr_{m}"] = float
    return conv


CONVERTERS = _converters()


def _apply(cfg: ExperimentConfig, key: str, text: str, where: str) -> None:
    if key not in CONVERTERS:
        raise ConfigurationError(f"{where}: unknown key {key!r}")
    try:
        value = CONVERTERS[key](text.strip())
    except ValueError as exc:
        raise ConfigurationError(f"{where}: invalid value for {key!r}: {exc}") from exc
    if key.startswith("unit_lr_"):
        cfg.unit_lr[key[len("unit_lr_"):]] = value
    else:
        setattr(cfg, key, value)


def parse_config_text(text: str, source: str = "<config>", base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base if base is not None else ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{source}:{lineno}: expected key = value, got {line.strip()!r}")
        key, value = stripped.split("=", 1)
        _apply(cfg, key.strip(), value, f"{source}:{lineno}")
    return cfg


def load_config(path: str | None = None, overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Read ``path`` (if given) and apply textual overrides, which win over file values."""
    cfg = ExperimentConfig()
    if path:
        with open(path, encoding="utf-8") as fh:
            cfg = parse_config_text(fh.read(), path, cfg)
    for key, text in (overrides or {}).items():
        _apply(cfg, key, text, f"--{key.replace('_', '-')}")
    return cfg.validate()
