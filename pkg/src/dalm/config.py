"""INI run configuration with typed defaults, typo rejection and resolved snapshots.

Example::

    [run]
    seed = 0
    output_dir = runs/toy

    [model]
    layers = 3
    hidden = 96

    [schedule]
    preset = mmau
"""
from __future__ import annotations

import configparser
import io
from pathlib import Path
from typing import Any, Mapping, Optional

from .errors import ConfigurationError, MissingFileError
from .fileio import atomic_write_text

SCHEMA: dict[str, dict[str, Any]] = {
    "run": {"seed": 0, "output_dir": "runs/default"},
    "model": {"layers": 3, "heads": 4, "hidden": 96, "max_positions": 512, "queries": 16},
    "stage": {"preset": "", "epochs": 0, "lr": 0.0, "warmup_steps": -1, "batch_size": 0, "max_steps": 0},
    "schedule": {"preset": "", "answer_length": 0, "block_length": 0, "steps": 0, "confidence": "probability"},
    "data": {
        "utterances": 600,
        "eval_utterances": 300,
        "text_contexts": 2000,
        "stage0_warm": 6,
        "qa_mix": 0.5,
        "context_style": "summary",
        "caption_source": "offline",
        "endpoint": "",
        "rewrite": False,
        "train": "",
        "benchmark": "",
    },
}


def _coerce(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"[{section}] {key} = {raw!r} is not a valid {type(default).__name__}") from exc
    return raw


class RunConfig:
    """Section -> key -> typed value; every key of ``SCHEMA`` is always present."""

    def __init__(self, values: Optional[Mapping[str, Mapping[str, Any]]] = None):
        self.values = {s: dict(keys) for s, keys in SCHEMA.items()}
        for section, keys in (values or {}).items():
            for key, value in keys.items():
                self.set(section, key, value)

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA:
            raise ConfigurationError(f"unknown config section [{section}]; known: {', '.join(SCHEMA)}")
        if key not in SCHEMA[section]:
            raise ConfigurationError(f"unknown key {key!r} in [{section}]; known: {', '.join(SCHEMA[section])}")
        default = SCHEMA[section][key]
        if isinstance(value, str) and not isinstance(default, str):
            value = _coerce(section, key, value, default)
        self.values[section][key] = value

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config: {exc}".splitlines()[0]) from exc
        cfg = cls()
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.set(section, key, raw)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"config file not found: {path}")
        return cls.from_text(path.read_text())

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section, keys in self.values.items():
            parser[section] = {k: str(v) for k, v in keys.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def snapshot(self, out_dir) -> Path:
        path = Path(out_dir) / "resolved_config.ini"
        atomic_write_text(path, self.to_text())
        return path
