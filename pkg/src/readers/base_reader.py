import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Iterator

from src.exceptions import InputError, SchemaError
from src.sources.base import DataSource

logger = logging.getLogger(__name__)


class BaseReader(ABC):
    """Streams the rows of one dataset table as column -> raw string dicts."""

    def __init__(self, file_path: Path, source: DataSource):
        if not file_path.exists():
            raise InputError(f"File not found: {file_path}")
        self.file_path = file_path
        self.source = source
        self.is_gzipped = file_path.suffix.lower() == ".gz"

    def expected_columns(self) -> set[str]:
        return {
            (field.alias or name).lower()
            for name, field in self.source.source_model.model_fields.items()
        }

    def check_columns(self, header: list[str]) -> None:
        # Optional model fields are still required as columns; cells may be empty
        present = {column.lower() for column in header}
        expected = self.expected_columns()
        missing = sorted(expected - present)
        if missing:
            raise SchemaError(
                f"Missing required columns in {self.file_path.name} ({self.source.table_name})\n"
                f"Required columns: {', '.join(sorted(expected))}\n"
                f"Missing columns: {', '.join(missing)}"
            )
        extra = sorted(present - expected)
        if extra:
            logger.debug(f"Ignoring columns {extra} in {self.file_path.name}")

    @property
    @abstractmethod
    def starting_row_number(self) -> int:
        """File line number of the first data row."""

    @abstractmethod
    def read(self) -> Iterator[dict[str, Any]]: ...

    @classmethod
    @abstractmethod
    def matches_source_type(cls, source_type: type) -> bool: ...

    def __iter__(self):
        return self.read()
