from typing import Optional

from pydantic import BaseModel, Field

from src.exceptions import ConfigurationError
from src.sources.base import DataSource
from src.sources.dataset import LATENT, LONGITUDINAL, SUBJECTS


class SourceRegistry(BaseModel):
    sources: list[DataSource] = Field(default_factory=list)

    def find_source_for_file(self, file_path: str) -> Optional[DataSource]:
        matching_sources = [
            source for source in self.sources if source.matches_file(file_path)
        ]

        if len(matching_sources) == 0:
            return None
        elif len(matching_sources) == 1:
            return matching_sources[0]
        else:
            source_names = [s.table_name for s in matching_sources]
            raise ConfigurationError(
                f"Multiple sources match file '{file_path}': {source_names}"
            )

    def get(self, table_name: str) -> DataSource:
        for source in self.sources:
            if source.table_name == table_name:
                return source
        raise ConfigurationError(f"No source registered for table {table_name!r}")


DATASET_SOURCES = SourceRegistry(sources=[SUBJECTS, LONGITUDINAL, LATENT])
