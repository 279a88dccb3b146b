"""Configuration dataclasses and the flat ``section.key=value`` document format.

The same text format is used for CLI config files and for the config block
embedded in checkpoints, so a checkpoint can always be re-instantiated
without the original config file.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError

SEED_ENV_VAR = "FACTOST_SEED"

DEFAULT_QUANTILES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

# cycle name -> cardinality
CALENDAR_CYCLES = {
    "minute_of_hour": 60,
    "time_of_day": 24,
    "day_of_week": 7,
    "week_of_month": 4,
    "month_of_year": 12,
}


@dataclass
class BackboneConfig:
    d_model: int = 256
    d_ff: int = 1024
    n_layers: int = 3
    n_heads: int = 4
    patch_len: int = 16
    max_ctx_patches: int = 128
    max_fut_patches: int = 16
    min_ctx_patches: int = 4
    quantiles: tuple[float, ...] = DEFAULT_QUANTILES
    rope_fraction: float = 0.75
    rope_base: float = 10000.0
    dropout: float = 0.1
    eps: float = 1e-5

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rope_dim(self) -> int:
        return int(round(self.rope_fraction * self.d_head))

    @property
    def n_tokens(self) -> int:
        return self.max_ctx_patches + 1 + self.max_fut_patches

    @property
    def max_context(self) -> int:
        return self.max_ctx_patches * self.patch_len

    @property
    def max_horizon(self) -> int:
        return self.max_fut_patches * self.patch_len

    @property
    def median_index(self) -> int:
        return list(self.quantiles).index(0.5)

    def validate(self) -> "BackboneConfig":
        for name in ("d_model", "d_ff", "n_layers", "n_heads", "patch_len",
                     "max_ctx_patches", "max_fut_patches", "min_ctx_patches"):
            value = getattr(self, name)
            # n_layers=0 is accepted: it gives an identity encoder used in tests.
            lower = 0 if name == "n_layers" else 1
            if value < lower:
                raise ConfigError(f"backbone.{name}: must be >= {lower}, got {value}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"backbone.d_model: {self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 < self.rope_fraction <= 1.0:
            raise ConfigError(f"backbone.rope_fraction: must be in (0, 1], got {self.rope_fraction}")
        r = self.rope_dim
        if r < 2 or r % 2:
            raise ConfigError(
                f"backbone.rope_fraction: rotated dims round({self.rope_fraction} * {self.d_head})"
                f" = {r} must be even and >= 2")
        q = list(self.quantiles)
        if not q or any(not 0.0 < x < 1.0 for x in q):
            raise ConfigError(f"backbone.quantiles: levels must lie in (0, 1), got {q}")
        if any(b <= a for a, b in zip(q, q[1:])):
            raise ConfigError(f"backbone.quantiles: must be strictly increasing, got {q}")
        if 0.5 not in q:
            raise ConfigError("backbone.quantiles: must contain 0.5")
        if self.min_ctx_patches > self.max_ctx_patches:
            raise ConfigError(
                f"backbone.min_ctx_patches: {self.min_ctx_patches} exceeds "
                f"max_ctx_patches={self.max_ctx_patches}")
        if self.rope_base <= 0:
            raise ConfigError("backbone.rope_base: must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"backbone.dropout: must be in [0, 1), got {self.dropout}")
        if self.eps <= 0:
            raise ConfigError("backbone.eps: must be positive")
        return self


# Architecture rows of the published model-scale table (d_model, d_ff, n_layers, n_heads).
BACKBONE_PRESETS = {
    "minuscule": dict(d_model=192, d_ff=768, n_layers=3, n_heads=3),
    "tiny": dict(d_model=256, d_ff=1024, n_layers=3, n_heads=4),
    "small": dict(d_model=384, d_ff=1536, n_layers=4, n_heads=6),
    "base": dict(d_model=512, d_ff=2048, n_layers=6, n_heads=8),
    # Minuscule scaled down for single-CPU runs.
    "desk": dict(d_model=64, d_ff=256, n_layers=2, n_heads=2,
                 max_ctx_patches=32, max_fut_patches=4, min_ctx_patches=4),
    # small enough for finite-difference gradient checks
    "audit": dict(d_model=8, d_ff=16, n_layers=1, n_heads=1, patch_len=4, max_ctx_patches=4,
                  max_fut_patches=2, min_ctx_patches=2, quantiles=(0.1, 0.5, 0.9), dropout=0.0),
}


def backbone_preset(name: str, **overrides: Any) -> BackboneConfig:
    try:
        base = dict(BACKBONE_PRESETS[name])
    except KeyError:
        raise ConfigError(f"backbone.preset: unknown preset {name!r}") from None
    base.update(overrides)
    return BackboneConfig(**base).validate()


@dataclass
class AdapterConfig:
    n_nodes: int = 20
    id_dim: int = 32
    calendar_cycles: tuple[str, ...] = ("minute_of_hour", "time_of_day", "day_of_week")
    n_prompts: int = 3
    prompt_rank: int = 3            # capped by n_prompts
    n_prototypes: int = 16
    max_lag: int = 3
    backbone_frozen: bool = False
    # ablation switches
    use_stmf: bool = True
    use_stf: bool = True
    use_prompts: bool = True

    def cycle_sizes(self) -> list[tuple[str, int]]:
        return [(c, CALENDAR_CYCLES[c]) for c in self.calendar_cycles]

    def validate(self, d_model: int | None = None) -> "AdapterConfig":
        for name in ("n_nodes", "id_dim", "n_prompts", "prompt_rank", "n_prototypes", "max_lag"):
            if getattr(self, name) < 1:
                raise ConfigError(f"adapter.{name}: must be >= 1, got {getattr(self, name)}")
        for c in self.calendar_cycles:
            if c not in CALENDAR_CYCLES:
                raise ConfigError(
                    f"adapter.calendar_cycles: unknown cycle {c!r}; "
                    f"choose from {sorted(CALENDAR_CYCLES)}")
        limit = self.n_prompts if d_model is None else min(self.n_prompts, d_model)
        if self.prompt_rank > limit:
            raise ConfigError(
                f"adapter.prompt_rank: {self.prompt_rank} exceeds min(n_prompts, d_model)={limit}")
        return self


@dataclass
class TrainConfig:
    peak_lr: float = 5e-4
    batch_size: int = 32
    total_steps: int = 1000
    warmup_frac: float = 0.1
    decay_frac: float = 0.2
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    loss_kind: str = "pinball"
    random_mask: bool = True
    # continual memory replay
    cmr: bool = True
    memory_frac: float = 0.2
    replace_ratio: float = 0.3
    few_shot_frac: float = 1.0
    eval_every: int = 50
    select_best: bool = True

    def validate(self) -> "TrainConfig":
        if self.peak_lr <= 0:
            raise ConfigError(f"train.peak_lr: must be positive, got {self.peak_lr}")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size: must be >= 1")
        if self.total_steps < 0:
            raise ConfigError("train.total_steps: must be >= 0")
        for name in ("warmup_frac", "decay_frac"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"train.{name}: must be in [0, 1), got {v}")
        if self.warmup_frac + self.decay_frac >= 1.0:
            raise ConfigError("train.warmup_frac: warmup_frac + decay_frac must be < 1")
        if self.loss_kind not in ("pinball", "l1_median"):
            raise ConfigError(f"train.loss_kind: expected pinball|l1_median, got {self.loss_kind!r}")
        if not 0.0 <= self.memory_frac < 1.0:
            raise ConfigError("train.memory_frac: must be in [0, 1)")
        if not 0.0 <= self.replace_ratio < 1.0:
            raise ConfigError("train.replace_ratio: must be in [0, 1)")
        if not 0.0 < self.few_shot_frac <= 1.0:
            raise ConfigError("train.few_shot_frac: must be in (0, 1]")
        return self


@dataclass
class DataConfig:
    corpus: str = ""            # CSV of univariate pretraining series (empty: synthesize)
    panel: str = ""             # CSV ST panel for adapt/evaluate (empty: synthetic fixture)
    n_series: int = 2000
    series_length: int = 512
    seed: int = 0
    freq_seconds: int = 300
    context_len: int = 64
    horizon: int = 64
    stride: int = 1
    train_ratio: float = 0.7
    val_ratio: float = 0.1
    test_ratio: float = 0.2
    forward_fill: bool = False
    st_nodes: int = 20
    st_days: int = 14


@dataclass
class BenchConfig:
    nodes: tuple[int, ...] = (100, 200, 400, 800)
    repeats: int = 5
    warmup: int = 2


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=lambda: backbone_preset("desk"))
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self) -> "RunConfig":
        self.backbone.validate()
        self.adapter.validate(self.backbone.d_model)
        self.train.validate()
        return self


SECTIONS = ("backbone", "adapter", "train", "data", "bench")


def _parse_value(key: str, raw: str, annotation: Any) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(annotation)
    try:
        if annotation is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        if annotation is str:
            return raw
        if origin is tuple:
            args = typing.get_args(annotation)
            item_type = args[0]
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(item_type(s) for s in items)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(annotation, '__name__', annotation)}") from None
    raise ConfigError(f"{key}: unsupported field type {annotation}")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _hints(cls: type) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    """Apply dotted ``section.field`` overrides in place. ``backbone.preset`` is applied first."""
    pairs = dict(pairs)
    preset = pairs.pop("backbone.preset", None)
    if preset is not None:
        cfg.backbone = backbone_preset(preset)
    for key, raw in pairs.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{key}: unknown key (expected one of {', '.join(s + '.*' for s in SECTIONS)})")
        target = getattr(cfg, section)
        hints = _hints(type(target))
        if name not in hints:
            raise ConfigError(f"{key}: unknown key")
        setattr(target, name, _parse_value(key, raw, hints[name]))
    return cfg


def default_config() -> RunConfig:
    cfg = RunConfig()
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"${SEED_ENV_VAR}: not an integer: {env_seed!r}") from None
        cfg.train.seed = seed
        cfg.data.seed = seed
    return cfg


AUDIT_DEFAULTS = {
    "backbone.preset": "audit",
    "adapter.n_nodes": "3",
    "adapter.id_dim": "4",
    "adapter.calendar_cycles": "time_of_day,day_of_week",
    "adapter.n_prompts": "2",
    "adapter.prompt_rank": "2",
    "adapter.n_prototypes": "2",
    "adapter.max_lag": "2",
}


def load_config(path: str | os.PathLike | None = None,
                overrides: dict[str, str] | None = None,
                base: dict[str, str] | None = None) -> RunConfig:
    """Built-in defaults < $FACTOST_SEED < ``base`` < config file < command-line overrides."""
    cfg = default_config()
    if base:
        apply_overrides(cfg, base)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        apply_overrides(cfg, parse_kv(text))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()


def dump_section(prefix: str, obj: Any) -> list[str]:
    return [f"{prefix}.{f.name}={_format_value(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]


def dump_config(cfg: RunConfig) -> str:
    lines: list[str] = []
    for section in SECTIONS:
        lines.extend(dump_section(section, getattr(cfg, section)))
    return "\n".join(lines) + "\n"


def config_to_dict(cfg: RunConfig) -> dict[str, str]:
    return parse_kv(dump_config(cfg))


def section_from_kv(cls: type, prefix: str, pairs: dict[str, str]) -> Any:
    """Rebuild one config dataclass from a flat mapping (unknown keys for the section are errors)."""
    hints = _hints(cls)
    kwargs = {}
    for key, raw in pairs.items():
        section, _, name = key.partition(".")
        if section != prefix:
            continue
        if name not in hints:
            raise ConfigError(f"{key}: unknown key")
        kwargs[name] = _parse_value(key, raw, hints[name])
    return cls(**kwargs)
