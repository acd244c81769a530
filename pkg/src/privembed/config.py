"""Sectioned key-value experiment configuration.

The on-disk format is INI-style text with a ``[meta]`` version, fixed
sections, and strict unknown-key rejection. Every key has a default, every
key can be overridden on the command line with ``--set section.key=value``,
and the fully resolved configuration is echoed into the output directory so
a run is reproducible from its artifacts alone.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

CONFIG_FORMAT_VERSION = 1


@dataclass(frozen=True)
class DataSettings:
    n_speakers: int = 2000
    segments_per_speaker: int = 10
    dim: int = 192
    gender_gap: float = 0.6
    speaker_spread: float = 1.0
    segment_noise: float = 1.0
    seed: int = 0
    aae_fraction: float = 0.5
    attacker_fraction: float = 0.25
    enroll_fraction: float = 0.5
    n_target_trials: int = 2000
    n_nontarget_trials: int = 2000


@dataclass(frozen=True)
class ModelSettings:
    latent_dim: int = 64
    disc_hidden: int = 32


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 10
    warmup_epochs: int = 1
    seed: int = 0
    epsilon_tr: float = 15.0
    adv_weight: float = 1.0


@dataclass(frozen=True)
class EvalSettings:
    attacker_hidden: int = 100
    attacker_lr: float = 1e-3
    attacker_batch_size: int = 128
    attacker_epochs: int = 10
    attacker_seed: int = 0
    noise_seed: int = 0
    epsilon_ts: tuple[float, ...] = (math.inf,)
    retrain_attacker_on_protected: bool = False


@dataclass(frozen=True)
class SweepSettings:
    # training budgets concentrate on the region where privacy/utility
    # actually moves at this data scale; see the README for the rationale
    epsilon_tr_grid: tuple[float, ...] = (6.0, 8.0, 15.0, 30.0, 60.0)
    epsilon_ts_grid: tuple[float, ...] = (5.0, 15.0, 35.0, math.inf)
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSettings = DataSettings()
    model: ModelSettings = ModelSettings()
    train: TrainSettings = TrainSettings()
    eval: EvalSettings = EvalSettings()
    sweep: SweepSettings = SweepSettings()


_SECTION_TYPES = {
    "data": DataSettings,
    "model": ModelSettings,
    "train": TrainSettings,
    "eval": EvalSettings,
    "sweep": SweepSettings,
}


def _parse_float(raw: str) -> float:
    raw = raw.strip()
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"expected a number, got {raw!r}") from None
    if math.isnan(value):
        raise ConfigError("NaN is not a valid configuration value")
    return value


def _parse_int(raw: str) -> int:
    raw = raw.strip()
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw!r}") from None


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_value(raw: str, default):
    """Coerce ``raw`` to the type of the default for that key."""
    if isinstance(default, bool):
        return _parse_bool(raw)
    if isinstance(default, int):
        return _parse_int(raw)
    if isinstance(default, float):
        return _parse_float(raw)
    if isinstance(default, tuple):
        items = [part for part in (p.strip() for p in raw.split(",")) if part]
        if not items:
            raise ConfigError(f"expected a comma-separated list, got {raw!r}")
        element = default[0] if default else 0.0
        if isinstance(element, int) and not isinstance(element, bool):
            return tuple(_parse_int(p) for p in items)
        return tuple(_parse_float(p) for p in items)
    return raw.strip()


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return format(value, ".12g")
    return str(value)


def _validate(cfg: ExperimentConfig) -> ExperimentConfig:
    d = cfg.data
    if d.n_speakers < 2 or d.segments_per_speaker < 1 or d.dim < 2:
        raise ConfigError("data section: counts out of range")
    if d.gender_gap < 0 or d.segment_noise < 0 or not d.speaker_spread > 0:
        raise ConfigError("data section: generator scales out of range")
    for name in ("aae_fraction", "attacker_fraction", "enroll_fraction"):
        v = getattr(d, name)
        if not (0.0 < v < 1.0):
            raise ConfigError(f"data section: {name} must be in (0, 1)")
    if d.n_target_trials < 1 or d.n_nontarget_trials < 1:
        raise ConfigError("data section: trial counts must be positive")
    m = cfg.model
    if m.latent_dim < 1 or m.disc_hidden < 1:
        raise ConfigError("model section: dimensions must be positive")
    t = cfg.train
    if t.batch_size < 2 or t.epochs < 0 or t.warmup_epochs < 1:
        raise ConfigError("train section: schedule out of range")
    if not t.lr > 0 or not t.epsilon_tr > 0 or t.adv_weight < 0:
        raise ConfigError("train section: lr, epsilon_tr and adv_weight out of range")
    e = cfg.eval
    if e.attacker_hidden < 1 or e.attacker_batch_size < 1 or e.attacker_epochs < 1:
        raise ConfigError("eval section: attacker schedule out of range")
    if not e.attacker_lr > 0:
        raise ConfigError("eval section: attacker_lr must be positive")
    if not e.epsilon_ts or any(not v > 0 for v in e.epsilon_ts):
        raise ConfigError("eval section: epsilon_ts values must be positive")
    s = cfg.sweep
    if not s.epsilon_tr_grid or any(not v > 0 for v in s.epsilon_tr_grid):
        raise ConfigError("sweep section: epsilon_tr grid values must be positive")
    if any(math.isinf(v) for v in s.epsilon_tr_grid):
        raise ConfigError("sweep section: epsilon_tr grid must be finite")
    if not s.epsilon_ts_grid or any(not v > 0 for v in s.epsilon_ts_grid):
        raise ConfigError("sweep section: epsilon_ts grid values must be positive")
    if not s.seeds:
        raise ConfigError("sweep section: at least one seed is required")
    return cfg


def _apply_entries(values: dict[str, dict[str, object]],
                   entries: list[tuple[str, str, str]]) -> None:
    for section, key, raw in entries:
        if section == "meta":
            if key != "version":
                raise ConfigError(f"unknown key [meta] {key}")
            version = _parse_int(raw)
            if version != CONFIG_FORMAT_VERSION:
                raise ConfigError(
                    f"unsupported config format version {version}, "
                    f"expected {CONFIG_FORMAT_VERSION}"
                )
            continue
        section_type = _SECTION_TYPES.get(section)
        if section_type is None:
            raise ConfigError(f"unknown config section [{section}]")
        defaults = {f.name: f.default for f in fields(section_type)}
        if key not in defaults:
            raise ConfigError(f"unknown key [{section}] {key}")
        try:
            values[section][key] = _parse_value(raw, defaults[key])
        except ConfigError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None


def resolve_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Build a configuration from defaults, an optional file, and overrides.

    ``overrides`` are ``section.key=value`` strings applied after the file.
    Unknown sections or keys anywhere are rejected.
    """
    values: dict[str, dict[str, object]] = {name: {} for name in _SECTION_TYPES}

    entries: list[tuple[str, str, str]] = []
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                entries.append((section, key, raw))
    _apply_entries(values, entries)

    override_entries: list[tuple[str, str, str]] = []
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        override_entries.append((section.strip(), key.strip(), raw))
    _apply_entries(values, override_entries)

    cfg = ExperimentConfig(
        data=DataSettings(**values["data"]),
        model=ModelSettings(**values["model"]),
        train=TrainSettings(**values["train"]),
        eval=EvalSettings(**values["eval"]),
        sweep=SweepSettings(**values["sweep"]),
    )
    return _validate(cfg)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Override every stage seed at once (the CLI ``--seed`` flag)."""
    return ExperimentConfig(
        data=DataSettings(**{**_asdict(cfg.data), "seed": int(seed)}),
        model=cfg.model,
        train=TrainSettings(**{**_asdict(cfg.train), "seed": int(seed)}),
        eval=EvalSettings(**{
            **_asdict(cfg.eval),
            "attacker_seed": int(seed),
            "noise_seed": int(seed),
        }),
        sweep=cfg.sweep,
    )


def _asdict(section) -> dict:
    return {f.name: getattr(section, f.name) for f in fields(section)}


def render_config(cfg: ExperimentConfig) -> str:
    """Canonical text form of a resolved configuration."""
    lines = ["[meta]", f"version = {CONFIG_FORMAT_VERSION}", ""]
    for name in _SECTION_TYPES:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_resolved_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(render_config(cfg), encoding="utf-8")
