"""Flat key-value run configuration.

INI-style files with one section level; every key is declared in the
schema below and unknown keys are rejected by name, so a checked-in
config reproduces a run bit-for-bit. Command-line flags override file
values.
"""

from __future__ import annotations

import configparser
from pathlib import Path


class ConfigError(Exception):
    pass


# section -> key -> coercion
SCHEMA: dict[str, dict[str, type]] = {
    "corpus": {
        "task": str, "train_fraction": float, "dev_count": int, "seed": int,
    },
    "embed": {
        "backend": str, "dimension": int, "seed": int, "endpoint": str,
        "timeout": float, "retries": int,
    },
    "partition": {
        "strategy": str, "m": int, "seed": int,
    },
    "index": {
        "max_connections": int, "ef_construction": int, "ef_search": int,
        "level_lambda": float, "seed": int,
    },
    "train": {
        "k": int, "metric": str, "rouge_mode": str, "i_max": int, "j_max": int,
        "max_episodes": int, "eval_every": int, "patience": int, "dev_slice": int,
        "candidate_temperature": float, "max_tokens": int, "seed": int,
        "zero_reward_streak": int,
    },
    "dqn": {
        "gamma": float, "learning_rate": float, "batch_size": int,
        "epsilon_start": float, "epsilon_end": float, "epsilon_decay_steps": int,
        "buffer_capacity": int, "seed": int,
    },
    "generator": {
        "backend": str, "endpoint": str, "model": str, "timeout": float,
        "retries": int, "cache_dir": str, "max_tokens": int,
    },
    "prompt": {
        "summarization": str, "translation": str, "dialogue": str,
    },
}

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def load_config(path: str | Path) -> dict[str, dict[str, object]]:
    """Parse and type-check a config file against the schema."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path, encoding="utf-8")
    out: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section: [{section}]")
        out[section] = {}
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key: {section}.{key}")
            out[section][key] = _coerce(section, key, raw)
    return out


def _coerce(section: str, key: str, raw: str):
    target = SCHEMA[section][key]
    try:
        if target is bool:
            low = raw.strip().lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(raw)
        return target(raw)
    except ValueError as exc:
        raise ConfigError(
            f"bad value for {section}.{key}: {raw!r} is not {target.__name__}") from exc


def section(config: dict, name: str) -> dict:
    return config.get(name, {})
