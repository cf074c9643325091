"""Typed INI run configuration with strict key checking.

Every section and key has a default below; a value's type is the type of its
default. Files may only set known keys, and ``section.key=value`` overrides
are applied on top. The fully resolved config can be written back out and
replayed as-is.
"""

from __future__ import annotations

import configparser
import copy
import io

__all__ = ["ConfigError", "DEFAULTS", "RunConfig", "parse_tuple"]


class ConfigError(ValueError):
    """Unknown key, unknown section or badly typed value."""


DEFAULTS: dict[str, dict[str, object]] = {
    "run": {
        "seed": 0,
        "out_dir": "runs/default",
        "threads": 1,
        "overwrite": False,
    },
    "meta": {
        "data_dir": "",
        "labels": "",
        "synthetic": 0,
        "synthetic_seed": 0,
        "resolution": 16,
        "width": 64,
        "depth": 4,
        "omega0": 30.0,
        "latent_shape": "4,4,8",
        "map_kind": "",
        "interpolation": "nearest",
        "coord_scheme": "per_patch",
        "inner_steps": 3,
        "inner_lr": 0.01,
        "outer_lr": 3e-5,
        "batch_size": 16,
        "iterations": 1000,
        "first_order": False,
        "log_every": 100,
        "target_psnr": 0.0,
    },
    "encode": {
        "checkpoint": "",
        "data_dir": "",
        "labels": "",
        "synthetic": 0,
        "synthetic_seed": 0,
        "batch_size": 64,
    },
    "normalize": {
        "kind": "none",
        "gamma": 1.0,
    },
    "quantize": {
        "functaset": "",
        "bits": 8,
    },
    "classify": {
        "functaset": "",
        "arch": "token_transformer",
        "num_classes": 10,
        "width": 64,
        "ffw_width": 128,
        "blocks": 2,
        "heads": 4,
        "dropout": 0.0,
        "label_smoothing": 0.1,
        "weight_decay": 0.1,
        "norm_scale": 1.0,
        "lr": 1e-3,
        "batch_size": 64,
        "ema_decay": 0.9999,
        "epochs": 20,
        "test_fraction": 0.2,
    },
    "diffuse": {
        "functaset": "",
        "checkpoint": "",
        "T": 1000,
        "schedule": "cosine",
        "timestep_ratio": 3.0,
        "dummy_prop": 0.2,
        "lr": 1e-4,
        "batch_size": 256,
        "iterations": 10000,
        "norm_kind": "vector",
        "gamma": 2.5,
        "ema_decay": 0.9999,
        "width": 256,
        "blocks": 3,
        "time_dim": 64,
        "class_dim": 64,
        "num_classes": 0,
        "dropout": 0.0,
        "num_samples": 16,
        "label": -1,
        "guidance": 1.0,
        "clip_denoised": 5.0,
    },
    "eval": {
        "checkpoint": "",
        "functaset": "",
        "trainset": "",
        "a": "",
        "b": "",
        "index": 0,
        "dim": 0,
        "strengths": "0,0.05,0.1,0.15,0.2",
        "resolution": 0,
        "count": 16,
        "clamp": True,
    },
}


def parse_tuple(text: str, kind=int) -> tuple:
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    try:
        return tuple(kind(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r} as a list of {kind.__name__}") from exc


def _coerce(section: str, key: str, raw: str, default):
    where = f"{section}.{key}"
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    return raw


class RunConfig:
    """Resolved configuration: ``cfg["meta"]["width"]`` or ``cfg.get("meta.width")``."""

    def __init__(self, values: dict | None = None):
        self.values = copy.deepcopy(DEFAULTS if values is None else values)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def get(self, dotted: str):
        section, key = self._split(dotted)
        return self.values[section][key]

    @staticmethod
    def _split(dotted: str):
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        return section, key

    def set(self, dotted: str, raw) -> None:
        section, key = self._split(dotted)
        default = DEFAULTS[section][key]
        self.values[section][key] = _coerce(section, key, _format(raw), default)

    def apply_overrides(self, pairs) -> None:
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} must look like section.key=value")
            key, value = pair.split("=", 1)
            self.set(key.strip(), value)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls()
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.set(f"{section}.{key}", raw)
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        for section, items in self.values.items():
            parser[section] = {k: _format(v) for k, v in items.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
