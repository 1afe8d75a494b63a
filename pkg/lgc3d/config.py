"""Configuration files: TOML or JSON, picked by suffix, validated through pydantic."""

import json
import tomllib
from pathlib import Path
from typing import Any
from typing import TypeVar

from pydantic import BaseModel
from pydantic import ValidationError

from .utils import ConfigurationError

ModelT = TypeVar("ModelT", bound=BaseModel)


def read_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigurationError(f"cannot read configuration file {path}: {exc.strerror}") from exc
    try:
        if path.suffix == ".toml":
            return tomllib.loads(raw.decode("utf-8"))
        if path.suffix == ".json":
            data = json.loads(raw)
            if not isinstance(data, dict):
                raise ConfigurationError(f"{path} must hold a JSON object")
            return data
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigurationError(f"{path} is not valid {path.suffix[1:].upper()}: {exc}") from exc
    raise ConfigurationError(f"unsupported configuration format {path.suffix!r}, use .toml or .json")


def validate_config(model: type[ModelT], data: dict[str, Any], source: str = "configuration") -> ModelT:
    """Validate ``data`` into ``model``, reporting pydantic errors as :class:`ConfigurationError`."""
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        details = "; ".join(
            f"{'.'.join(str(part) for part in error['loc']) or model.__name__}: {error['msg']}"
            for error in exc.errors()
        )
        raise ConfigurationError(f"invalid {source}: {details}") from exc


def load_config(model: type[ModelT], path: str | Path, overrides: dict[str, Any] | None = None) -> ModelT:
    data = read_config_file(path)
    data.update({key: value for key, value in (overrides or {}).items() if value is not None})
    return validate_config(model, data, source=str(path))
