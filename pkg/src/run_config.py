"""Run configuration: one TOML file (or a JSON config echo) with CLI overrides."""

import json
import logging
import tomllib
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.exceptions import ConfigurationError, InputError
from src.model_core import (
    AGE_CENTER,
    ModelSpec,
    PatientRecord,
    PenaltyConfig,
    PriorConfig,
    build_model_spec,
    parse_sensitivity,
)
from src.sampler import SamplerConfig
from src.simulator import SimTruth
from src.spline import NcsBasis

logger = logging.getLogger(__name__)


class ModelSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # fixed:RHO, uniform:LO,HI or beta:A,B
    sensitivity: str = "fixed:0.75"
    n_knots: Optional[int] = Field(default=None, ge=2)
    penalty: PenaltyConfig = PenaltyConfig()
    priors: PriorConfig = PriorConfig()
    quadrature: Literal["gk15", "gk7"] = "gk15"
    ncs_boundary_knots: Optional[tuple[float, float]] = None
    ncs_internal_knots: Optional[tuple[float, ...]] = None
    bh_horizon: Optional[float] = Field(default=None, gt=0)
    age_center: float = AGE_CENTER

    @field_validator("sensitivity")
    @classmethod
    def check_sensitivity(cls, v: str) -> str:
        try:
            parse_sensitivity(v)
        except ConfigurationError as e:
            raise ValueError(str(e)) from e
        return v

    def sensitivity_mode(self):
        return parse_sensitivity(self.sensitivity)

    def ncs(self) -> Optional[NcsBasis]:
        if self.ncs_internal_knots is None:
            return None
        if self.ncs_boundary_knots is None:
            raise ConfigurationError("ncs_internal_knots needs ncs_boundary_knots")
        try:
            return NcsBasis(
                boundary_knots=self.ncs_boundary_knots, internal_knots=self.ncs_internal_knots
            )
        except ValidationError as e:
            raise ConfigurationError(f"Invalid natural spline knots: {e}") from e

    def build_spec(self, patients: list[PatientRecord]) -> ModelSpec:
        return build_model_spec(
            patients,
            self.sensitivity_mode(),
            n_knots=self.n_knots,
            penalty=self.penalty,
            priors=self.priors,
            quadrature=self.quadrature,
            ncs=self.ncs(),
            bh_horizon=self.bh_horizon,
            age_center=self.age_center,
        )


class SimulateSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    truth: SimTruth = SimTruth()
    n_datasets: int = Field(default=1, ge=1)


class PathsSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: Optional[Path] = None
    out: Optional[Path] = None
    checkpoints: Optional[Path] = None


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelSection = ModelSection()
    sampler: SamplerConfig = SamplerConfig()
    simulate: SimulateSection = SimulateSection()
    paths: PathsSection = PathsSection()


def _load_toml(path: Path) -> dict:
    with open(path, "rb") as f:
        return tomllib.load(f)


def _load_json(path: Path) -> dict:
    payload = json.loads(path.read_text())
    # Config echoes wrap the run config with provenance fields
    return payload.get("run_config", payload)


_CONFIG_LOADERS = {".toml": _load_toml, ".json": _load_json}


def load_run_config(path: Optional[Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise InputError(f"Config file not found: {path}")
    loader = _CONFIG_LOADERS.get(path.suffix.lower())
    if loader is None:
        raise ConfigurationError(
            f"Unsupported config extension {path.suffix}; expected one of {sorted(_CONFIG_LOADERS)}"
        )
    try:
        payload = loader(path)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot parse {path}: {e}") from e
    try:
        config = RunConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid run config {path}: {e}") from e
    logger.debug(f"Loaded run config from {path}")
    return config


def apply_overrides(config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Set dotted keys (e.g. 'sampler.seed'); None values are ignored."""
    payload = config.model_dump(mode="json")
    for key, value in overrides.items():
        if value is None:
            continue
        *parents, leaf = key.split(".")
        node = payload
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = json.loads(json.dumps(value, default=str))
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration override: {e}") from e
