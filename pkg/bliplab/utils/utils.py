import dataclasses
import hashlib
import json
import logging
import os
import types
from pathlib import Path
from typing import (
    Any,
    Dict,
    Optional,
    Type,
    TypeVar,
    Union,
    get_args,
    get_origin,
    get_type_hints,
)

import numpy as np
import numpy.typing as npt
from pytransform3d.rotations import matrix_from_quaternion, random_quaternion

from bliplab.exceptions import ConfigError

LOG_LEVELS = {
    "error": logging.ERROR,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

ConfigT = TypeVar("ConfigT")


def configure_logging(level: Optional[str] = None) -> logging.Logger:
    """
    Attach one stream handler to the package logger.

    Parameters
    ------------
    level : Optional[str]
        One of "error", "info" or "debug". Defaults to the ``BLIPLAB_LOG``
        environment variable, then "info".

    Returns
    --------
    logging.Logger
        The ``bliplab`` logger.
    """
    level = level or os.environ.get("BLIPLAB_LOG", "info")
    if level.lower() not in LOG_LEVELS:
        raise ConfigError(
            f"BLIPLAB_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}"
        )
    logger = logging.getLogger("bliplab")
    logger.setLevel(LOG_LEVELS[level.lower()])
    if not any(
        getattr(handler, "_bliplab", False) for handler in logger.handlers
    ):
        handler = logging.StreamHandler()
        handler.setFormatter(
            logging.Formatter(
                "%(asctime)s %(levelname)s %(name)s: %(message)s"
            )
        )
        handler._bliplab = True
        logger.addHandler(handler)
    return logger


def _type_name(annotation) -> str:
    if dataclasses.is_dataclass(annotation):
        return f"object ({annotation.__name__})"
    origin = get_origin(annotation)
    if origin in (Union, types.UnionType):
        names = [_type_name(a) for a in get_args(annotation)]
        return " or ".join(n if n != "NoneType" else "null" for n in names)
    if origin is tuple:
        return "list"
    return getattr(annotation, "__name__", str(annotation))


def _convert(value: Any, annotation, key: str):
    origin = get_origin(annotation)
    if origin in (Union, types.UnionType):
        options = get_args(annotation)
        if value is None and type(None) in options:
            return None
        errors = []
        for option in options:
            if option is type(None):
                continue
            try:
                return _convert(value, option, key)
            except ConfigError as error:
                errors.append(error)
        raise errors[0]
    if dataclasses.is_dataclass(annotation):
        if not isinstance(value, dict):
            raise ConfigError(
                f"{key}: expected {_type_name(annotation)}, got "
                f"{type(value).__name__}"
            )
        return config_from_dict(annotation, value, key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(
                f"{key}: expected list, got {type(value).__name__}"
            )
        (item_type, *_) = get_args(annotation)
        return tuple(
            _convert(item, item_type, f"{key}[{index}]")
            for index, item in enumerate(value)
        )
    if annotation is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif annotation is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif annotation in (str, bool):
        if isinstance(value, annotation):
            return value
    elif annotation is Any:
        return value
    raise ConfigError(
        f"{key}: expected {_type_name(annotation)}, got "
        f"{type(value).__name__} ({value!r})"
    )


def config_from_dict(
    config_type: Type[ConfigT], data: Dict, path: str = ""
) -> ConfigT:
    """
    Build a (possibly nested) config dataclass from parsed JSON.

    Unknown keys are rejected. Keys of fields without a default are
    required. Errors name the dotted key and the expected type.

    Parameters
    ------------
    config_type : Type
        The dataclass to build.
    data : Dict
        The parsed JSON object.
    path : str
        Dotted prefix used in error messages.

    Returns
    --------
    The dataclass instance.
    """
    hints = get_type_hints(config_type)
    fields = {f.name: f for f in dataclasses.fields(config_type)}
    prefix = f"{path}." if path else ""

    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(
            f"Unknown config key {prefix}{unknown[0]}; allowed keys are "
            f"{sorted(fields)}"
        )

    kwargs = {}
    for name, field in fields.items():
        key = f"{prefix}{name}"
        if name not in data:
            required = (
                field.default is dataclasses.MISSING
                and field.default_factory is dataclasses.MISSING
            )
            if required:
                raise ConfigError(
                    f"Missing config key {key} (expected "
                    f"{_type_name(hints[name])})"
                )
            continue
        kwargs[name] = _convert(data[name], hints[name], key)
    return config_type(**kwargs)


def config_to_dict(config) -> Dict:
    """Nested plain-dict form of a config dataclass (JSON serializable)."""
    result = dataclasses.asdict(config)
    return json.loads(json.dumps(result))


def open_config_file(
    file_path: Union[str, Path], config_type: Type[ConfigT]
) -> ConfigT:
    """
    Read a JSON config file into ``config_type``.

    Parameters
    ------------
    file_path : Union[str, Path]
        The path to the config file.
    config_type : Type
        The dataclass the file describes.

    Returns
    --------
    The parsed config.

    Raises
    --------
    ConfigError
        If the file is missing, is not valid JSON or does not match the
        schema of ``config_type``.
    """
    file_path = Path(file_path)
    if not file_path.is_file():
        raise ConfigError(f"Config file {file_path} does not exist")
    with open(file_path, "r") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as error:
            raise ConfigError(
                f"{file_path}:{error.lineno}: invalid JSON ({error.msg})"
            ) from None
    if not isinstance(data, dict):
        raise ConfigError(f"{file_path}: top level must be an object")
    return config_from_dict(config_type, data)


def config_hash(data: Dict) -> str:
    """SHA-256 of the canonical JSON form of ``data``."""
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def random_rotation(rng: np.random.Generator) -> npt.NDArray[np.float64]:
    """A rotation matrix drawn uniformly from SO(3)."""
    return matrix_from_quaternion(random_quaternion(rng))
