"""Flat run configuration with file and command-line overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

TASK_MODES = ("multi", "cls-only", "loc-only")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    lr: float = 5e-6
    epochs: int = 100
    batch: int = 32
    dropout: float = 0.2
    grad_clip: float = 1.0
    weight_decay: float = 0.01
    pgd_eps: float = 0.02
    pgd_mu: float = 0.01
    pgd_steps: int = 3
    sigma: float = 0.01
    focal_gamma: float = 2.0
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    L_c: int = 512
    N_l: int = 256
    N_t: int = 64
    seed: int = 0
    edat_enabled: bool = True
    task_mode: str = "multi"
    warmup_epochs: int = 0
    min_freq: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task_mode not in TASK_MODES:
            raise ConfigError(f"task_mode must be one of {TASK_MODES}, got {self.task_mode!r}")
        positive = ("lr", "batch", "pgd_eps", "pgd_steps", "d_model", "n_layers", "n_heads", "L_c", "N_l", "N_t")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs", "warmup_epochs", "sigma", "pgd_mu", "focal_gamma", "weight_decay", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.min_freq < 1:
            raise ConfigError("min_freq must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return apply_overrides(self, changes)


def _coerce(name: str, value, target_type):
    if isinstance(value, str):
        text = value.strip()
        if target_type is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{name}: cannot read {value!r} as a boolean")
        if target_type is str:
            if text.startswith('"'):
                try:
                    return str(json.loads(text))
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{name}: cannot parse {value!r}") from exc
            return text
        try:
            value = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{name}: cannot parse {value!r}") from exc
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name}: expected a string, got {value!r}")
    return value


_TYPES = {"float": float, "int": int, "bool": bool, "str": str}


def apply_overrides(base: RunConfig, overrides: dict) -> RunConfig:
    known = {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(RunConfig)}
    values = base.to_dict()
    for key, raw in overrides.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw, known[key])
    return RunConfig(**values)


def parse_config_text(text: str) -> dict:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"config line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (which win)."""
    cfg = RunConfig()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg = apply_overrides(cfg, parse_config_text(fh.read()))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in cfg.to_dict().items())
