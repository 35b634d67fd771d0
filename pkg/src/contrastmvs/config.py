"""Plain-text ``key = value`` configuration with sections.

The reference file ``data/default.ini`` documents every key and mirrors the
dataclass defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import fields, replace
from importlib import resources
from pathlib import Path

from .features import ModelConfig
from .fusion_eval import FusionThresholds
from .losses import LossConfig
from .matching import CascadeConfig
from .trainer import TrainConfig

__all__ = ["ConfigError", "default_config_text", "load_config", "parse_config"]

SECTIONS = ("train", "cascade", "model", "loss", "fusion")


class ConfigError(ValueError):
    pass


def default_config_text() -> str:
    return resources.files("contrastmvs").joinpath("data/default.ini").read_text()


def _coerce(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            conv = int if default and isinstance(default[0], int) else float
            return tuple(conv(x) for x in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None
    return raw


def _apply(obj, section: configparser.SectionProxy, skip=()):
    known = {f.name: getattr(obj, f.name) for f in fields(obj) if f.name not in skip}
    updates = {}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        updates[key] = _coerce(raw, known[key], f"[{section.name}] {key}")
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section.name}] {exc}") from exc


def parse_config(text: str) -> tuple[TrainConfig, FusionThresholds]:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section(s) {unknown}")
    model = ModelConfig()
    cascade = CascadeConfig()
    loss = LossConfig()
    fusion = FusionThresholds()
    train = TrainConfig()
    if "model" in cp:
        model = _apply(model, cp["model"])
    if "cascade" in cp:
        cascade = _apply(cascade, cp["cascade"], skip=("model",))
    cascade = replace(cascade, model=model)
    if "loss" in cp:
        loss = _apply(loss, cp["loss"])
    if "fusion" in cp:
        fusion = _apply(fusion, cp["fusion"])
    if "train" in cp:
        train = _apply(train, cp["train"], skip=("cascade", "loss"))
    return replace(train, cascade=cascade, loss=loss), fusion


def load_config(path: str | Path | None = None) -> tuple[TrainConfig, FusionThresholds]:
    """Parse ``path`` (or the reference defaults when None)."""
    if path is None:
        return parse_config(default_config_text())
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{p}: config file not found")
    return parse_config(p.read_text())
