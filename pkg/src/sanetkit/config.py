"""Run configuration: an INI-style ``key = value`` file with [model], [train], [data] and [eval] sections.

Every key has a type and a default; unknown sections or keys are rejected.
``SANETKIT_SEED`` in the environment replaces the default seed (0) but not
a seed written in the file or given as an override.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from .backbone import BackboneConfig
from .errors import ConfigError
from .model import VARIANTS, ModelConfig
from .train import TrainConfig

SEED_ENV = "SANETKIT_SEED"


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(" ", "").split(",") if p)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_SEED = object()  # placeholder resolved to default_seed() at load time

SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "model": {
        "variant": (_choice(*VARIANTS), "sanet"),
        "c_prime": (int, 32),
        "num_classes": (int, 6),
        "stem_channels": (int, 16),
        "stage_channels": (_int_tuple, (16, 32, 64, 128)),
        "blocks_per_stage": (int, 1),
        "dtype": (_choice("float64", "float32"), "float64"),
        "seed": (int, _SEED),
    },
    "train": {
        "lr": (float, 1e-4),
        "weight_decay": (float, 0.01),
        "batch_size": (int, 2),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "patience": (int, 5),
        "max_epochs": (int, 50),
        "augment": (_bool, True),
        "seed": (int, _SEED),
    },
    "data": {
        "patch": (int, 512),
        "val": (str, ""),
        "val_fraction": (float, 0.25),
    },
    "eval": {
        "batch_size": (int, 8),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.values["model"]["dtype"])

    def model_config(self) -> ModelConfig:
        m = self.values["model"]
        if len(m["stage_channels"]) != 4:
            raise ConfigError(f"model.stage_channels needs 4 values, got {m['stage_channels']}")
        backbone = BackboneConfig(stem_channels=m["stem_channels"], stage_channels=m["stage_channels"],
                                  blocks_per_stage=m["blocks_per_stage"])
        return ModelConfig.variant(m["variant"], backbone=backbone, c_prime=m["c_prime"],
                                   num_classes=m["num_classes"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.values["train"])

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section, items in self.values.items():
            parser[section] = {k: _fmt(v) for k, v in items.items()}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in parser[section].items())
            lines.append("")
        return "\n".join(lines)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def _parse_value(section: str, key: str, text: str) -> Any:
    try:
        parse, _ = SCHEMA[section][key]
    except KeyError:
        known = ", ".join(sorted(SCHEMA.get(section, {})))
        raise ConfigError(f"unknown config key {section}.{key}" + (f" (known: {known})" if known else "")) from None
    try:
        return parse(text.strip())
    except ValueError as exc:
        raise ConfigError(f"{section}.{key} = {text!r}: {exc}") from None


def parse_override(item: str) -> tuple[str, str, str]:
    """``section.key=value`` -> (section, key, value)."""
    name, sep, value = item.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot or not key:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    return section, key, value


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    seed = default_seed()
    values = {s: {k: (seed if d is _SEED else d) for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                           inline_comment_prefixes=(";", "#"))
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, text in parser[section].items():
                values[section][key] = _parse_value(section, key, text)
    for item in overrides:
        section, key, text = parse_override(item)
        if section not in SCHEMA:
            raise ConfigError(f"override {item!r}: unknown section {section!r}")
        values[section][key] = _parse_value(section, key, text)
    cfg = RunConfig(values)
    # validate early so a bad file fails before any work starts
    cfg.model_config()
    cfg.train_config()
    if values["data"]["patch"] < 32 or values["data"]["patch"] % 32:
        raise ConfigError(f"data.patch must be a positive multiple of 32, got {values['data']['patch']}")
    if not 0 < values["data"]["val_fraction"] < 1:
        raise ConfigError("data.val_fraction must lie in (0, 1)")
    return cfg
