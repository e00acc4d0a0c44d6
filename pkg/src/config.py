import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from dotenv import find_dotenv, load_dotenv
from pydantic import (BaseModel, ConfigDict, Field, NonNegativeInt,
                      PositiveInt, ValidationError, field_validator)

from pruning.metrics_report import DEFAULT_INPUT_SPATIAL
from pruning.pattern_library import (DEFAULT_DICT_SIZES, DEFAULT_SEED,
                                     DEFAULT_TRIALS, Adjacency, Variant)
from pruning.pruning_engine import MaskSharing

ENV_PREFIX = "RTOSS_"
DEFAULT_VARIANT = Variant.EP3
# relaxed executor comparison; 0 means bit-exact
RELAXED_TOLERANCE = 1e-6

ENV_FIELDS = (
    "variant",
    "dict_size",
    "trials",
    "seed",
    "threads",
    "mask_sharing",
    "adjacency",
    "exempt_short_layers",
    "include_non_prunable",
)
PATH_FIELDS = {"model", "out", "dictionary", "report", "input", "assignments"}


class ConfigError(Exception):
    """Custom exception for configuration errors"""

    pass


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    # None until a dictionary file or the default decides it
    variant: Optional[Variant] = None
    dict_size: Optional[PositiveInt] = None
    trials: NonNegativeInt = DEFAULT_TRIALS
    seed: NonNegativeInt = DEFAULT_SEED
    threads: PositiveInt = 1
    mask_sharing: MaskSharing = MaskSharing.PER_KERNEL
    adjacency: Adjacency = Adjacency.CONNECTED_COMPONENT
    exempt_short_layers: bool = True
    include_non_prunable: bool = False
    strict_paper: bool = False
    input_spatial: Tuple[PositiveInt, PositiveInt] = DEFAULT_INPUT_SPATIAL
    tolerance: float = Field(default=0.0, ge=0.0)

    model: Optional[Path] = None
    out: Optional[Path] = None
    dictionary: Optional[Path] = None
    report: Optional[Path] = None
    input: Optional[Path] = None
    assignments: Optional[Path] = None

    @field_validator("variant", mode="before")
    @classmethod
    def _parse_variant(cls, value: Any) -> Any:
        if value is None or isinstance(value, Variant):
            return value
        return Variant.parse(value)

    @field_validator("mask_sharing", "adjacency", mode="before")
    @classmethod
    def _lower(cls, value: Any) -> Any:
        return value.strip().lower() if isinstance(value, str) else value

    @property
    def resolved_variant(self) -> Variant:
        return self.variant or DEFAULT_VARIANT

    @property
    def resolved_dict_size(self) -> int:
        return self.dict_size or DEFAULT_DICT_SIZES[self.resolved_variant]

    def with_variant(self, variant: Variant) -> "RunConfig":
        return self.model_copy(update={"variant": variant})

    def provenance(self) -> Dict[str, Any]:
        """Resolved settings for reports, without paths"""
        data = self.model_dump(mode="json", exclude=PATH_FIELDS)
        data["variant"] = self.resolved_variant.value
        data["dict_size"] = self.resolved_dict_size
        return data


def env_overrides(environ: Mapping[str, str]) -> Dict[str, str]:
    """RTOSS_* variables that name a config field"""
    return {
        field: environ[ENV_PREFIX + field.upper()]
        for field in ENV_FIELDS
        if environ.get(ENV_PREFIX + field.upper(), "").strip()
    }


def resolve_config(
    cli_values: Mapping[str, Any], environ: Optional[Mapping[str, str]] = None
) -> RunConfig:
    """
    Build the run configuration: flags over RTOSS_* variables over defaults.

    When no environment is passed, a .env file in the working directory is
    loaded first; it never overrides variables already set.
    """
    if environ is None:
        load_dotenv(find_dotenv(usecwd=True))
        environ = os.environ

    values: Dict[str, Any] = dict(env_overrides(environ))
    values.update({key: value for key, value in cli_values.items() if value is not None})
    if values.get("strict_paper"):
        values["mask_sharing"] = MaskSharing.LAYER_SHARED
        values["adjacency"] = Adjacency.ANY_ADJACENT_PAIR

    try:
        return RunConfig(**values)
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"Invalid configuration: {str(e)}") from e
