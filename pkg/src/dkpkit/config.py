"""Training configuration: a line-oriented ``key = value`` text format.

Blank lines and ``#`` comments are ignored.  Unknown keys, malformed lines
and out-of-range values are rejected with the offending line number.  Every
key has a documented default, so an empty file is a valid configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from enum import Enum

from .doped import DopedMode


class ConfigError(Exception):
    """Invalid configuration file or value."""


@dataclass(frozen=True)
class PresetSpec:
    """Training recipe: scaling mode plus which mitigations are active."""

    mode: DopedMode
    bcd: bool
    cmr: bool


# The named training recipes for doped layers.  "1" is the unmitigated
# baseline; "CMR" replaces scaling with the row-dropout schedule.
PRESETS: dict[str, PresetSpec] = {
    "1": PresetSpec(DopedMode.PLAIN, bcd=False, cmr=False),
    "2a": PresetSpec(DopedMode.BETA_SCALED, bcd=False, cmr=False),
    "2b": PresetSpec(DopedMode.ALPHA_BETA_SCALED, bcd=False, cmr=False),
    "2a+BCD": PresetSpec(DopedMode.BETA_SCALED, bcd=True, cmr=False),
    "2b+BCD": PresetSpec(DopedMode.ALPHA_BETA_SCALED, bcd=True, cmr=False),
    "CMR": PresetSpec(DopedMode.PLAIN, bcd=False, cmr=True),
}

METHODS = ("dense", "dkp", "prune", "lmf", "small")
VOCAB_MODES = ("char", "word")
OPTIMIZERS = ("sgd", "momentum", "adam")
OVERLAY_INITS = ("zeros", "uniform")


@dataclass
class TrainConfig:
    """All run settings.  Defaults produce a small char-level configuration;
    schedule positions are in fractional epochs and are resolved to steps
    once the corpus (and so the epoch length) is known."""

    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    vocab_mode: str = "char"
    min_count: int = 1

    hidden_size: int = 128
    num_layers: int = 1
    tie_embeddings: bool = False
    act_dropout: float = 0.0

    method: str = "dkp"
    factor: float = 1.0
    preset: str = "1"
    target_sparsity: float = 0.0   # 0 = derive from factor via budget matching
    kp_b_shape: str = ""           # e.g. "16x16"; empty = auto-select
    kp_c_shape: str = ""
    overlay_init: str = "zeros"

    prune_start_epoch: float = 1.0
    prune_end_epoch: float = 0.0   # 0 = auto (75% of training)
    prune_exponent: int = 3
    base_keep_prob: float = 0.7
    bcd_period: int = 0            # steps; 0 = one epoch

    optimizer: str = "adam"
    lr: float = 2e-3
    lr_decay: float = 1.0
    momentum: float = 0.9
    clip: float = 5.0
    epochs: int = 5
    batch_size: int = 32
    bptt: int = 32
    seed: int = 0
    lambda_alpha: float = 1e-3
    lambda_beta: float = 1e-3

    eval_per_epoch: int = 1
    sweep_methods: str = "dkp,prune,lmf,small"
    sweep_factors: str = "5,10,25"

    def preset_spec(self) -> PresetSpec:
        return PRESETS[self.preset]

    def kp_shapes(self) -> tuple[tuple[int, int], tuple[int, int]] | None:
        """Explicit factor shapes from config, or None for auto-selection."""
        if not self.kp_b_shape and not self.kp_c_shape:
            return None
        if not (self.kp_b_shape and self.kp_c_shape):
            raise ConfigError("kp_b_shape and kp_c_shape must be set together")
        return _parse_shape(self.kp_b_shape), _parse_shape(self.kp_c_shape)

    def sweep_method_list(self) -> list[str]:
        return [m.strip() for m in self.sweep_methods.split(",") if m.strip()]

    def sweep_factor_list(self) -> list[float]:
        return [float(f) for f in self.sweep_factors.split(",") if f.strip()]


def _parse_shape(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"shape must look like 16x16, got {text!r}")
    try:
        rows, cols = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ConfigError(f"shape must be integers, got {text!r}") from exc
    if rows < 1 or cols < 1:
        raise ConfigError(f"shape must be positive, got {text!r}")
    return rows, cols


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}

_RANGE_CHECKS = {
    "vocab_mode": lambda v: v in VOCAB_MODES,
    "method": lambda v: v in METHODS,
    "preset": lambda v: v in PRESETS,
    "optimizer": lambda v: v in OPTIMIZERS,
    "overlay_init": lambda v: v in OVERLAY_INITS,
    "min_count": lambda v: v >= 1,
    "hidden_size": lambda v: v >= 1,
    "num_layers": lambda v: v >= 1,
    "factor": lambda v: v >= 1.0,
    "target_sparsity": lambda v: 0.0 <= v <= 1.0,
    "prune_start_epoch": lambda v: v >= 0.0,
    "prune_end_epoch": lambda v: v >= 0.0,
    "prune_exponent": lambda v: v >= 1,
    "base_keep_prob": lambda v: 0.0 < v <= 1.0,
    "bcd_period": lambda v: v >= 0,
    "lr": lambda v: v >= 0.0,
    "lr_decay": lambda v: 0.0 < v <= 1.0,
    "momentum": lambda v: 0.0 <= v < 1.0,
    "clip": lambda v: v >= 0.0,
    "epochs": lambda v: v >= 0,
    "batch_size": lambda v: v >= 1,
    "bptt": lambda v: v >= 1,
    "act_dropout": lambda v: 0.0 <= v < 1.0,
    "lambda_alpha": lambda v: v >= 0.0,
    "lambda_beta": lambda v: v >= 0.0,
    "eval_per_epoch": lambda v: v >= 1,
}


def parse_config_text(text: str, source: str = "<config>") -> TrainConfig:
    cfg = TrainConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(
                f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        value_text = raw_value.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        ftype = _FIELD_TYPES[key]
        try:
            if ftype in ("bool", bool):
                value = _parse_bool(value_text)
            elif ftype in ("int", int):
                value = int(value_text)
            elif ftype in ("float", float):
                value = float(value_text)
            else:
                value = value_text
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
        check = _RANGE_CHECKS.get(key)
        if check is not None and not check(value):
            raise ConfigError(
                f"{source}:{lineno}: value out of range for {key}: {value!r}")
        setattr(cfg, key, value)
    validate_config(cfg)
    return cfg


def parse_config(path) -> TrainConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))


def validate_config(cfg: TrainConfig) -> None:
    if cfg.prune_end_epoch and cfg.prune_end_epoch <= cfg.prune_start_epoch:
        raise ConfigError("prune_end_epoch must exceed prune_start_epoch")
    cfg.kp_shapes()  # raises on half-specified shapes
    for m in cfg.sweep_method_list():
        if m not in METHODS:
            raise ConfigError(f"unknown sweep method {m!r}")
    try:
        factors = cfg.sweep_factor_list()
    except ValueError as exc:
        raise ConfigError(f"bad sweep_factors: {exc}") from exc
    if any(f < 1.0 for f in factors):
        raise ConfigError("sweep factors must be >= 1")


def serialize_config(cfg: TrainConfig) -> str:
    """Canonical text round-tripping through parse_config_text."""
    lines = []
    for f in sorted(fields(TrainConfig), key=lambda f: f.name):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        elif isinstance(value, Enum):
            text = value.value
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
