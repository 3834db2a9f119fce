"""Flat ``key = value`` experiment configs and per-component seed derivation."""

from __future__ import annotations

import typing
import zlib
from dataclasses import MISSING, dataclass, fields
from typing import Any, Dict, Iterable, Optional, Tuple

import numpy as np

from .sim import SceneConfig
from .track import TrackerConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


# keys that belong to the experiment rather than one component
GLOBAL_KEYS = {"seed": int, "num_scenes": int, "eval_seed_offset": int}
SECTIONS = {"scene": SceneConfig, "train": TrainConfig, "tracker": TrackerConfig}
# scene and training both carry a seed; the root seed replaces them
_DERIVED = {"seed"}


@dataclass(frozen=True)
class KeySpec:
    name: str
    section: str
    kind: Any
    default: Any


def _default(f):
    if f.default is not MISSING:
        return f.default
    return f.default_factory()  # pragma: no cover


def key_specs() -> Dict[str, KeySpec]:
    specs = {k: KeySpec(k, "global", t, {"seed": 0, "num_scenes": 2, "eval_seed_offset": 1000}[k]) for k, t in GLOBAL_KEYS.items()}
    for section, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            if f.name in _DERIVED:
                continue
            if f.name in specs:
                raise RuntimeError(f"config key {f.name!r} is ambiguous")
            specs[f.name] = KeySpec(f.name, section, hints[f.name], _default(f))
    return specs


def parse_value(spec: KeySpec, text: str):
    """Parse ``text`` according to the declared type of ``spec``."""
    kind = spec.kind
    raw = text.strip()
    try:
        origin = typing.get_origin(kind)
        args = typing.get_args(kind)
        if origin is typing.Union and type(None) in args:
            if raw.lower() in ("none", ""):
                return None
            kind = next(a for a in args if a is not type(None))
            origin, args = typing.get_origin(kind), typing.get_args(kind)
        if origin in (tuple, Tuple):
            parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(a(p.strip()) for a, p in zip(args, parts))
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError("expected true or false")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return kind(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value {text!r} for {spec.name}: {exc}") from None


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config(path) -> Dict[str, str]:
    """Raw key/value strings from a config file; ``#`` starts a comment."""
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    out = {}
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


@dataclass(frozen=True)
class Experiment:
    seed: int
    num_scenes: int
    eval_seed_offset: int
    scene: SceneConfig
    train: TrainConfig
    tracker: TrackerConfig

    def values(self) -> Dict[str, Any]:
        out = {"seed": self.seed, "num_scenes": self.num_scenes, "eval_seed_offset": self.eval_seed_offset}
        for section in SECTIONS:
            obj = getattr(self, section)
            out.update({f.name: getattr(obj, f.name) for f in fields(obj) if f.name not in _DERIVED})
        return out

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for key, value in self.values().items():
                fh.write(f"{key} = {format_value(value)}\n")

    def scene_config(self, index: int = 0) -> SceneConfig:
        from dataclasses import replace

        return replace(self.scene, seed=derive_seed(self.seed, f"scene{index}"))

    def train_config(self) -> TrainConfig:
        from dataclasses import replace

        return replace(self.train, seed=derive_seed(self.seed, "train"))


def build_experiment(file_values: Optional[Dict[str, str]] = None, overrides: Optional[Dict[str, Any]] = None) -> Experiment:
    """Defaults, then the config file, then already-parsed flag overrides."""
    specs = key_specs()
    values = {k: s.default for k, s in specs.items()}
    for key, text in (file_values or {}).items():
        if key not in specs:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = parse_value(specs[key], text)
    for key, value in (overrides or {}).items():
        if key not in specs:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            values[key] = value
    sections = {}
    for section, cls in SECTIONS.items():
        kw = {k: values[k] for k, s in specs.items() if s.section == section}
        try:
            obj = cls(**kw)
            if hasattr(obj, "validate"):
                obj.validate()
        except ValueError as exc:
            raise ConfigError(f"invalid {section} config: {exc}") from None
        sections[section] = obj
    return Experiment(values["seed"], values["num_scenes"], values["eval_seed_offset"], **sections)


def derive_seed(root: int, component: str) -> int:
    """Independent, reproducible seed for a named component of an experiment."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(component.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def keys_for(sections: Iterable[str]) -> Dict[str, KeySpec]:
    wanted = set(sections) | {"global"}
    return {k: s for k, s in key_specs().items() if s.section in wanted}
