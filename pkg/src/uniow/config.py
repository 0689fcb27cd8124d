"""Run configuration: defaults, INI files, and override flags.

One RunConfig bundles every tunable the pipeline reads. Precedence is
defaults < config file < --set overrides < explicit --seed. Unknown
sections or keys are rejected rather than ignored, and the effective
merged view can be rendered back to INI so each run leaves a provenance
record next to its outputs.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from .assign import AssignConfig
from .data import WorldSpec
from .embedding import ScoreParams
from .errors import ConfigError
from .infer import InferConfig
from .metrics import EvalConfig
from .train import TrainConfig


@dataclass(frozen=True)
class TextEncConfig:
    """Encoder construction knobs not owned by any training stage."""

    rank: int = 4

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError(f"rank must be at least 1: {self.rank}")


@dataclass(frozen=True)
class RunConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    assign: AssignConfig = field(default_factory=AssignConfig)
    score: ScoreParams = field(default_factory=ScoreParams)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    textenc: TextEncConfig = field(default_factory=TextEncConfig)


_SECTION_TYPES = {
    "world": WorldSpec,
    "train": TrainConfig,
    "assign": AssignConfig,
    "score": ScoreParams,
    "infer": InferConfig,
    "eval": EvalConfig,
    "textenc": TextEncConfig,
}

_CASTS = {"int": int, "float": float, "str": str}


def _cast(section: str, key: str, type_name: str, raw: str):
    raw = raw.strip()
    if type_name == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key}: not a boolean: {raw!r}")
    caster = _CASTS.get(type_name)
    if caster is None:
        raise ConfigError(f"[{section}] {key}: unsupported field type {type_name}")
    try:
        return caster(raw)
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: {e}") from e


def _field_types(section: str) -> dict[str, str]:
    return {f.name: f.type for f in fields(_SECTION_TYPES[section])}


def _apply(values: dict[str, dict], section: str, key: str, raw: str) -> None:
    if section not in _SECTION_TYPES:
        raise ConfigError(f"unknown config section [{section}]")
    types = _field_types(section)
    if key not in types:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    values[section][key] = _cast(section, key, types[key], raw)


def load_run_config(
    config_path: str | None = None,
    overrides: list[str] | None = None,
    seed: int | None = None,
) -> RunConfig:
    """Merge defaults, an optional INI file, --set overrides, and --seed.

    overrides entries look like "section.key=value". A seed, when given,
    lands in both world.seed and train.seed.
    """
    values: dict[str, dict] = {s: {} for s in _SECTION_TYPES}
    if config_path is not None:
        parser = configparser.ConfigParser(
            interpolation=None, inline_comment_prefixes=("#", ";")
        )
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                parser.read_file(f)
        except configparser.Error as e:
            raise ConfigError(f"{config_path}: {e}") from e
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(values, section, key, raw)
    for ov in overrides or []:
        head, sep, raw = ov.partition("=")
        section, dot, key = head.partition(".")
        if not sep or not dot or not section or not key:
            raise ConfigError(f"override must look like section.key=value: {ov!r}")
        _apply(values, section.strip(), key.strip(), raw)
    if seed is not None:
        values["world"]["seed"] = seed
        values["train"]["seed"] = seed
    built = {}
    for section, cls in _SECTION_TYPES.items():
        try:
            built[section] = cls(**values[section])
        except (ValueError, TypeError) as e:
            raise ConfigError(f"[{section}]: {e}") from e
    return RunConfig(**built)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_run_config(cfg: RunConfig) -> str:
    """Render the effective config as deterministic INI text."""
    out = io.StringIO()
    for section in _SECTION_TYPES:
        part = getattr(cfg, section)
        out.write(f"[{section}]\n")
        for f in fields(part):
            out.write(f"{f.name} = {_format_value(getattr(part, f.name))}\n")
        out.write("\n")
    return out.getvalue()
