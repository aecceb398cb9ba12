import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable

import numpy as np
import xxhash

from src.readers.base_reader import BaseReader

logger = logging.getLogger(__name__)


def create_field_mapping(reader: BaseReader) -> Dict[str, str]:
    """Create a mapping from field aliases/lowercase names to actual field names."""
    field_mapping = {}
    for field_name, field_info in reader.source.source_model.model_fields.items():
        if field_info.alias:
            field_mapping[field_info.alias.lower()] = field_name
        else:
            field_mapping[field_name.lower()] = field_name
    return field_mapping


def create_reverse_field_mapping(reader: BaseReader) -> Dict[str, str]:
    reverse_mapping = {}
    for field_name, field_info in reader.source.source_model.model_fields.items():
        reverse_mapping[field_name] = field_info.alias or field_name
    return reverse_mapping


def extract_validation_error_message(
    validation_error: Any, reverse_field_mapping: Dict[str, str]
) -> list[dict]:
    """Flatten pydantic error details into [{column_name, column_value, error_type, error_msg}]."""
    errors = validation_error if isinstance(validation_error, list) else [validation_error]
    error_dicts = []
    for error in errors:
        if not isinstance(error, dict):
            error_dicts.append({"error_msg": str(error).lower()})
            continue
        error_dict = {}
        if error.get("loc"):
            field_name = str(error["loc"][0])
            error_dict["column_name"] = reverse_field_mapping.get(field_name, field_name)
        if error.get("input") is not None and not isinstance(error["input"], dict):
            error_dict["column_value"] = str(error["input"])
        if error.get("type"):
            error_dict["error_type"] = error["type"]
        if error.get("msg"):
            error_dict["error_msg"] = error["msg"].lower()
        error_dicts.append(error_dict)
    return error_dicts


def create_fingerprint(paths: Iterable[Path]) -> str:
    """xxh64 over the bytes of the given files, in order."""
    digest = xxhash.xxh64()
    for path in paths:
        digest.update(Path(path).name.encode("utf-8"))
        digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def to_jsonable(value: Any) -> Any:
    """numpy scalars/arrays to builtins; non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, Path):
        return str(value)
    return value
