"""Strict JSON experiment files: unknown keys and bad values are reported with their line"""

from __future__ import annotations

import json
import re
import types
from dataclasses import fields
from enum import Enum
from pathlib import Path
from typing import Any, Union, get_args, get_origin

from ...components import app_logger
from ...components.custom_exceptions import ConfigurationError, ExperimentConfigError
from ...utils.definitions import (
    AdapterConfig,
    ArchConfig,
    ExperimentConfig,
    RunConfig,
    TaskSpec,
)

SECTIONS: dict[str, type] = {
    "arch": ArchConfig,
    "adapter": AdapterConfig,
    "run": RunConfig,
    "task": TaskSpec,
}


def _line_of(text: str, key: str, start: int = 0) -> tuple[int | None, int]:
    """1-based line of the first `"key":` at or after offset `start`, and its offset"""
    match = re.compile(rf'"{re.escape(key)}"\s*:').search(text, start)
    if match is None:
        return None, start
    return text.count("\n", 0, match.start()) + 1, match.start()


def _coerce(value: Any, annotation: Any) -> Any:
    """Checks `value` against a field annotation, converting enums and ints-as-floats

    Raises:
        TypeError: If the value does not fit the annotation
    """
    origin = get_origin(annotation)
    if origin is Union or origin is types.UnionType:
        options = get_args(annotation)
        if value is None and type(None) in options:
            return None
        for option in options:
            if option is type(None):
                continue
            try:
                return _coerce(value, option)
            except (TypeError, ValueError):
                continue
        raise TypeError(f"expected {annotation}, got {value!r}")

    if isinstance(annotation, type) and issubclass(annotation, Enum):
        return annotation(value)
    if annotation is bool:
        if not isinstance(value, bool):
            raise TypeError(f"expected true/false, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise TypeError(f"expected a string, got {value!r}")
        return value
    return value


def _build(
    cls: type,
    values: Any,
    prefix: str,
    text: str,
    path: str,
    offset: int,
) -> Any:
    if not isinstance(values, dict):
        line, _ = _line_of(text, prefix.rsplit(".", 1)[-1]) if prefix else (1, 0)
        raise ExperimentConfigError(
            f"{path}:{line}: '{prefix or '<root>'}' must be an object", path=path, key=prefix, line=line
        )

    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        dotted = f"{prefix}.{key}" if prefix else key
        line, position = _line_of(text, key, offset)
        if key not in known:
            app_logger.error("Unknown config key %s at %s:%s", dotted, path, line)
            raise ExperimentConfigError(
                f"{path}:{line}: unknown key '{dotted}'", path=path, key=dotted, line=line
            )
        if not prefix and key in SECTIONS:
            kwargs[key] = _build(SECTIONS[key], value, key, text, path, position)
            continue
        try:
            kwargs[key] = _coerce(value, known[key].type)
        except (TypeError, ValueError) as error:
            raise ExperimentConfigError(
                f"{path}:{line}: invalid value for '{dotted}': {error}", path=path, key=dotted, line=line
            ) from None

    try:
        return cls(**kwargs)
    except ConfigurationError as error:
        line, _ = _line_of(text, prefix, 0) if prefix else (None, 0)
        raise ExperimentConfigError(
            f"{path}:{line or 1}: invalid '{prefix or '<root>'}' section: {error}",
            path=path,
            key=prefix or None,
            line=line,
        ) from None


def parse_experiment(text: str, path: str = "<string>") -> ExperimentConfig:
    """Parses experiment JSON; every omitted field takes its documented default"""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as error:
        app_logger.error("Malformed JSON in %s at line %s", path, error.lineno)
        raise ExperimentConfigError(
            f"{path}:{error.lineno}: malformed JSON: {error.msg}", path=path, line=error.lineno
        ) from None
    return _build(ExperimentConfig, raw, "", text, path, 0)


def load_experiment(path: str | Path) -> ExperimentConfig:
    """Reads and validates an experiment file

    Args:
        path (str | Path): The JSON file

    Returns:
        ExperimentConfig: The parsed configuration

    Raises:
        ExperimentConfigError: If the file is missing, malformed or holds unknown keys
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as error:
        app_logger.error("Cannot read experiment config %s", path)
        raise ExperimentConfigError(
            f"Cannot read experiment config '{path}': {error.strerror}", path=str(path)
        ) from None
    return parse_experiment(text, str(path))
