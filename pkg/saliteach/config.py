"""YAML configuration: dataclass trees to plain data and back.

Config keys mirror dataclass field names. Enums are written by value,
tuples and named tuples as lists.
"""

from __future__ import annotations

import dataclasses
import doctest
import hashlib
import os
import types
import typing
from enum import Enum
from pathlib import Path
from typing import Any, TypeVar, Union

import yaml

from .errors import ConfigurationError

OUTPUT_ROOT_ENV = "SALITEACH_OUTPUT_ROOT"

T = TypeVar("T")


def to_plain(obj: Any) -> Any:
    """Convert dataclasses, enums, tuples and paths into YAML/JSON-safe values.

    >>> from saliteach.data import CausalPatch
    >>> to_plain(CausalPatch())
    {'region': [2, 2, 7, 7], 'period': 4.0, 'contrast': 0.3}
    """
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (tuple, list)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, Path):
        return str(obj)
    return obj


def from_plain(cls: type[T], data: Any, where: str = "") -> T:
    """Build dataclass ``cls`` from a mapping, converting nested values by annotation.

    >>> from saliteach.data import CausalPatch
    >>> from_plain(CausalPatch, {"region": [0, 0, 4, 4]})
    CausalPatch(region=Region(top=0, left=0, height=4, width=4), period=4.0, contrast=0.3)

    >>> from_plain(CausalPatch, {"colour": "red"}, "data.causal_patch")
    Traceback (most recent call last):
    ...
    saliteach.errors.ConfigurationError: unknown key data.causal_patch.colour
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where or cls.__name__} must be a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}  # type: ignore[arg-type]
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else str(key)
        if key not in names:
            raise ConfigurationError(f"unknown key {path}")
        kwargs[key] = _convert(hints[key], value, path)
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"{where or cls.__name__}: {e}") from e


def _convert(tp: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    if origin in (Union, types.UnionType):
        options = typing.get_args(tp)
        if value is None and type(None) in options:
            return None
        errors = []
        for option in options:
            if option is type(None):
                continue
            try:
                return _convert(option, value, where)
            except ConfigurationError as e:
                errors.append(str(e))
        raise ConfigurationError(errors[0] if errors else f"{where}: unexpected value {value!r}")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where} must be a list, got {value!r}")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigurationError(f"{where} needs {len(args)} values, got {len(value)}")
        return tuple(_convert(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if isinstance(tp, type):
        if dataclasses.is_dataclass(tp):
            return from_plain(tp, value, where)
        if issubclass(tp, Enum):
            try:
                return tp(value)
            except ValueError:
                raise ConfigurationError(
                    f"{where}: {value!r} is not one of {[m.value for m in tp]}"
                ) from None
        if issubclass(tp, tuple) and hasattr(tp, "_fields"):
            if isinstance(value, dict):
                return tp(**{k: _convert(int, v, f"{where}.{k}") for k, v in value.items()})
            return tp(*_convert(tuple[int, ...], value, where))
        if tp is bool:
            if not isinstance(value, bool):
                raise ConfigurationError(f"{where} must be true or false, got {value!r}")
            return value
        if tp in (int, float):
            numeric = isinstance(value, (int, float)) and not isinstance(value, bool)
            if not numeric or (tp is int and not float(value).is_integer()):
                raise ConfigurationError(f"{where} must be {tp.__name__}, got {value!r}")
            return tp(value)
        if tp is str:
            return str(value)
    return value


def read_yaml(path: Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return data


def dump_yaml(data: Any) -> str:
    return yaml.safe_dump(to_plain(data), sort_keys=True, default_flow_style=False)


def config_hash(data: Any) -> str:
    """sha256 of the canonical YAML rendering.

    >>> config_hash({"b": 1, "a": (1, 2)}) == config_hash({"a": [1, 2], "b": 1})
    True
    """
    return hashlib.sha256(dump_yaml(data).encode()).hexdigest()


def output_root(default: str = "runs") -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or default)


def load_tests(loader, tests, ignore):
    tests.addTests(doctest.DocTestSuite())
    return tests


if __name__ == "__main__":
    doctest.testmod()
