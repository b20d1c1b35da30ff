# SPDX-License-Identifier: Apache-2.0

"""Run configuration.

A run config is a flat mapping of dotted keys such as `trainer.lr` or
`data.dataset`. Values come from, in increasing precedence, built-in
defaults, the `EMBEDCLUSTER_SEED` environment variable (seed only), a
config file, and explicit overrides (command line flags).

Config files may be JSON, TOML, YAML, or flat `key=value` lines.
Nested tables are flattened to dotted keys. A `pyproject.toml` file is
read from its `[tool.embedcluster]` table.
"""

from __future__ import annotations

from typing import *

import json
import logging
import os
import re
import sys

import yaml

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import ConfigError

from .trainer import TrainConfig

__all__ = [
    "DEFAULTS",
    "RunConfig",
    "load_run_config",
    "write_config",
]

log = logging.getLogger(__name__)

SEED_ENV = "EMBEDCLUSTER_SEED"

CONFIG_NAME = "config.yml"

_TRAINER_DEFAULTS = TrainConfig()

DEFAULTS: Dict[str, Any] = {
    "data.dataset": "blobs",
    "data.path": "",
    "data.format": "auto",
    "data.per_cluster": 200,
    "data.dim": 16,
    "data.separation": 10.0,
    "data.sigma": 1.0,
    "data.noise": 0.1,
    "augment.transforms": _TRAINER_DEFAULTS.augment,
    "augment.inputs": ",".join(_TRAINER_DEFAULTS.inputs),
    "model.encoder_kind": _TRAINER_DEFAULTS.encoder_kind,
    "model.encoder_hidden": list(_TRAINER_DEFAULTS.encoder_hidden),
    "model.embedding_dim": _TRAINER_DEFAULTS.embedding_dim,
    "model.head_hidden": _TRAINER_DEFAULTS.head_hidden,
    "model.proj_dim": _TRAINER_DEFAULTS.proj_dim,
    "model.conv_channels": list(_TRAINER_DEFAULTS.conv_channels),
    "run.out": "run",
    "run.seed": 0,
    **{
        f"trainer.{name}": val
        for name, val in _TRAINER_DEFAULTS.as_dict().items()
        if name
        not in (
            "seed",
            "augment",
            "inputs",
            "encoder_kind",
            "encoder_hidden",
            "embedding_dim",
            "head_hidden",
            "proj_dim",
            "conv_channels",
        )
    },
}

# Keys whose values are fed to TrainConfig under a different name
_TRAIN_CONFIG_KEYS = {
    "run.seed": "seed",
    "augment.transforms": "augment",
    "augment.inputs": "inputs",
    "model.encoder_kind": "encoder_kind",
    "model.encoder_hidden": "encoder_hidden",
    "model.embedding_dim": "embedding_dim",
    "model.head_hidden": "head_hidden",
    "model.proj_dim": "proj_dim",
    "model.conv_channels": "conv_channels",
}


class RunConfig:
    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self.values = {**DEFAULTS}
        self.sources: Dict[str, str] = dict.fromkeys(DEFAULTS, "default")
        if values:
            self.update(values, "override")

    def update(self, values: Mapping[str, Any], source: str):
        for key, val in _flatten(values).items():
            self.values[key] = coerce(key, val)
            self.sources[key] = source

    def __getitem__(self, key: str):
        return self.values[key]

    def train_config(self) -> TrainConfig:
        kw: Dict[str, Any] = {}
        for key, val in self.values.items():
            if key.startswith("trainer."):
                kw[key[len("trainer.") :]] = val
            elif key in _TRAIN_CONFIG_KEYS:
                kw[_TRAIN_CONFIG_KEYS[key]] = val
        kw["inputs"] = [part.strip() for part in kw["inputs"].split(",")]
        return TrainConfig.from_dict(kw).validate()

    def nested(self) -> Dict[str, Any]:
        nested: Dict[str, Any] = {}
        for key in sorted(self.values):
            section, name = key.split(".", 1)
            nested.setdefault(section, {})[name] = self.values[key]
        return nested

    def __repr__(self):
        changed = sorted(key for key, src in self.sources.items() if src != "default")
        return f"<RunConfig {' '.join(changed) or 'defaults'}>"


def _flatten(data: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for name, val in data.items():
        key = f"{prefix}{name}"
        if isinstance(val, dict):
            flat.update(_flatten(val, f"{key}."))
        else:
            flat[key] = val
    return flat


def coerce(key: str, val: Any):
    """Returns val converted to the type of the default for key."""
    try:
        default = DEFAULTS[key]
    except KeyError:
        raise ConfigError(f"unknown config key '{key}'") from None
    try:
        return _coerce_to(default, val)
    except (TypeError, ValueError):
        raise ConfigError(
            f"invalid value for {key}: {val!r} (expected {type(default).__name__})"
        ) from None


def _coerce_to(default: Any, val: Any):
    if isinstance(default, bool):
        if isinstance(val, bool):
            return val
        s = str(val).strip().lower()
        if s in ("true", "yes", "on", "1"):
            return True
        if s in ("false", "no", "off", "0"):
            return False
        raise ValueError(val)
    if isinstance(default, int):
        if isinstance(val, float) and not val.is_integer():
            raise ValueError(val)
        return int(val)
    if isinstance(default, float):
        return float(val)
    if isinstance(default, list):
        parts = val.split(",") if isinstance(val, str) else list(val)
        item_type = type(default[0]) if default else str
        return [item_type(part.strip() if isinstance(part, str) else part) for part in parts]
    if isinstance(val, (dict, list)):
        raise TypeError(val)
    return str(val)


# =============================================================
# Load
# =============================================================


def load_run_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    env: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    env = os.environ if env is None else env
    config = RunConfig()
    seed = env.get(SEED_ENV)
    if seed:
        config.update({"run.seed": seed}, SEED_ENV)
    if path:
        config.update(load_config_file(path), path)
    if overrides:
        config.update({key: val for key, val in overrides.items() if val is not None}, "flag")
    log.debug("effective config: %s", config.values)
    return config


def load_config_file(path: str) -> Dict[str, Any]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        s = raw.decode()
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not text") from None
    try:
        data = _try_parsers(
            [_parse_json, _parse_toml, _parse_kv, _parse_yaml], s, path
        )
    except ValueError:
        raise ConfigError(
            f"unable to parse config {path} - verify valid JSON, TOML, YAML, "
            "or key=value lines"
        ) from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(
            f"invalid config in {path}, expected mapping but got {type(data).__name__}"
        )
    if os.path.basename(path) == "pyproject.toml":
        data = data.get("tool", {}).get("embedcluster", {})
    return _flatten(data)


Parser = Callable[[str, str], Any]


def _try_parsers(parsers: List[Parser], s: str, filename: str):
    for p in parsers:
        try:
            return p(s, filename)
        except ValueError:
            pass
    raise ValueError()


def _parse_json(s: str, filename: str):
    try:
        return json.loads(s)
    except Exception as e:
        log.debug("Could not parse JSON config %s: %s", filename, e)
        raise ValueError(e) from None


def _parse_toml(s: str, filename: str):
    try:
        return tomllib.loads(s)
    except tomllib.TOMLDecodeError as e:
        log.debug("Could not parse TOML config %s: %s", filename, e)
        raise ValueError(e) from None


_KV_LINE = re.compile(r"^([A-Za-z_][\w.-]*)\s*=\s*(.*?)\s*$")


def _parse_kv(s: str, filename: str):
    """Parses `section.name=value` lines. Blank lines and `#` comments
    are skipped.
    """
    data: Dict[str, Any] = {}
    for lineno, line in enumerate(s.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        m = _KV_LINE.match(line)
        if not m:
            log.debug("Could not parse key=value config %s, line %i", filename, lineno)
            raise ValueError(line)
        key, val = m.groups()
        if len(val) >= 2 and val[0] == val[-1] and val[0] in "\"'":
            val = val[1:-1]
        data[key] = val
    if not data:
        raise ValueError("no key=value lines")
    return data


def _parse_yaml(s: str, filename: str):
    try:
        return yaml.safe_load(s)
    except Exception as e:
        log.debug("Could not parse YAML config %s: %s", filename, e)
        raise ValueError(e) from None


def write_config(config: RunConfig, out_dir: str):
    """Writes the effective config to `config.yml` in out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, CONFIG_NAME)
    with open(path, "w") as f:
        yaml.safe_dump(config.nested(), f, sort_keys=True)
    return path
