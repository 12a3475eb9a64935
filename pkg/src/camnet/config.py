"""Run configuration: one JSON file covering model, training and data.

The file has four sections (``backbone``, ``attention``, ``train``,
``synth``) plus a top-level ``seed``. Every section maps onto the
corresponding dataclass; unknown keys are rejected rather than ignored so
typos fail loudly. Individual values can be overridden from the command
line with dotted ``section.key=value`` assignments.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .attention import AttentionConfig
from .backbone import BackboneConfig
from .data import SynthConfig
from .errors import ConfigError
from .training import TrainConfig

_SECTIONS = {
    "backbone": BackboneConfig,
    "attention": AttentionConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
}


def _build_section(name: str, cls, payload: dict):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) in section {name!r}: {sorted(unknown)}; "
            f"allowed: {sorted(allowed)}")
    return cls(**payload)


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seed: int = 0

    def __post_init__(self):
        size, _ = self.backbone.penultimate_geometry()
        if self.attention.map_size != size:
            raise ConfigError(
                f"attention.map_size is {self.attention.map_size} but the "
                f"backbone tap is {size}x{size}; they must match")
        if self.synth.num_classes != self.backbone.num_classes:
            raise ConfigError(
                f"synth.num_classes ({self.synth.num_classes}) differs from "
                f"backbone.num_classes ({self.backbone.num_classes})")

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        unknown = set(payload) - set(_SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(
                f"unknown top-level key(s): {sorted(unknown)}; "
                f"allowed: {sorted(_SECTIONS) + ['seed']}")
        kwargs = {
            name: _build_section(name, section_cls, payload.get(name, {}))
            for name, section_cls in _SECTIONS.items()
        }
        seed = payload.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        return cls(seed=seed, **kwargs)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            payload = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}")
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}
        # tuples don't survive a JSON round trip, lists do
        out["attention"]["pre_channels"] = list(out["attention"]["pre_channels"])
        out["seed"] = self.seed
        return out


def parse_override(text: str) -> tuple[list[str], object]:
    """Parse one ``section.key=value`` assignment; values are JSON literals."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    dotted, raw = text.split("=", 1)
    keys = dotted.strip().split(".")
    if len(keys) != 2 and keys != ["seed"]:
        raise ConfigError(
            f"override key {dotted!r} must be 'seed' or 'section.key'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings are fine unquoted
    return keys, value


def apply_overrides(payload: dict, assignments: list[str]) -> dict:
    """Return a copy of a config dict with CLI overrides applied."""
    out = json.loads(json.dumps(payload))  # deep copy, JSON types only
    for text in assignments:
        keys, value = parse_override(text)
        if len(keys) == 1:
            out[keys[0]] = value
        else:
            section, key = keys
            if section not in _SECTIONS:
                raise ConfigError(
                    f"override section {section!r} unknown; "
                    f"allowed: {sorted(_SECTIONS)}")
            out.setdefault(section, {})[key] = value
    return out
