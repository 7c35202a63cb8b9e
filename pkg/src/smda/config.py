"""Run configuration: JSON schemas shipped with the package, defaults, validation."""

from __future__ import annotations

import copy
import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema


class ConfigError(ValueError):
    """Invalid or unreadable configuration (CLI exit status 2)."""


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files("smda").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(instance, name: str) -> None:
    """Validate against a packaged schema; raise ConfigError naming the offending path."""
    validator = jsonschema.Draft202012Validator(load_schema(name))
    errors = sorted(validator.iter_errors(instance), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{name} config invalid at {where}: {e.message}")


def default_config() -> dict:
    text = resources.files("smda").joinpath("configs", "default.json").read_text()
    return json.loads(text)


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "augment":
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_run_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the file at ``path``, then ``overrides``; validated before returning.

    The augmentation block is replaced wholesale, not merged, so a config can
    turn augmentation off with ``"augment": {}``.
    """
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("run config must be a JSON object")
        validate(user, "run")
        cfg = merge(cfg, user)
    if overrides:
        cfg = merge(cfg, overrides)
    validate(cfg, "run")
    validate(cfg["augment"], "augment")
    return cfg
