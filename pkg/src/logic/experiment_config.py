"""
Experiment configuration: the YAML schema, its validation, hashing and the
CAFLOW_* process settings.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.config import (
    ABLATION_PRESETS,
    CONFIG_SCHEMA_VERSION,
    METRIC_DEFAULTS,
    REFLOW_DEFAULTS,
    RUNTIME_DEFAULTS,
)
from src.logic.datasets import DistributionSpec, preset
from src.logic.errors import ConfigError, DistributionError
from src.logic.flowcore import FlowConfig
from src.logic.training import TrainConfig
from src.Utilities.utils import canonical_json_bytes, sha256_hex

logger = logging.getLogger(__name__)

METRIC_NAMES = ("sliced_wasserstein", "nfss", "coupling_preservation", "reconstruction", "nfe")


class RuntimeSettings(BaseSettings):
    """Process knobs read from CAFLOW_* environment variables (and .env)."""

    model_config = SettingsConfigDict(env_prefix="CAFLOW_", extra="ignore")

    log_level: str = RUNTIME_DEFAULTS["log_level"]
    out_root: str = RUNTIME_DEFAULTS["out_root"]
    jobs: int = Field(RUNTIME_DEFAULTS["jobs"], ge=1)
    show_progress: bool = RUNTIME_DEFAULTS["show_progress"]


class ReflowConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_pairs: int = Field(REFLOW_DEFAULTS["n_pairs"], ge=1)
    sim_steps: int = Field(REFLOW_DEFAULTS["sim_steps"], ge=1)
    rounds: int = Field(REFLOW_DEFAULTS["rounds"], ge=1)
    max_drop_fraction: float = Field(REFLOW_DEFAULTS["max_drop_fraction"], ge=0.0, le=1.0)


class MetricsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    selections: List[str] = Field(default_factory=lambda: list(METRIC_DEFAULTS["selections"]))
    n_eval: int = Field(METRIC_DEFAULTS["n_eval"], ge=1)
    n_heldout: int = Field(METRIC_DEFAULTS["n_heldout"], ge=1)
    n_plot_paths: int = Field(METRIC_DEFAULTS["n_plot_paths"], ge=0)
    n_projections: int = Field(METRIC_DEFAULTS["n_projections"], ge=1)
    nfss_n_t: int = Field(METRIC_DEFAULTS["nfss_n_t"], ge=1)
    nfss_sim_factor: int = Field(METRIC_DEFAULTS["nfss_sim_factor"], ge=1)
    max_nfss_skip_fraction: float = Field(METRIC_DEFAULTS["max_nfss_skip_fraction"], ge=0.0, le=1.0)
    bootstrap_samples: int = Field(METRIC_DEFAULTS["bootstrap_samples"], ge=1)
    psnr_cap_db: float = Field(METRIC_DEFAULTS["psnr_cap_db"], gt=0.0)
    reconstruction_steps: int = Field(METRIC_DEFAULTS["reconstruction_steps"], ge=1)

    @field_validator("selections")
    @classmethod
    def _known_metrics(cls, value: List[str]) -> List[str]:
        unknown = sorted(set(value) - set(METRIC_NAMES))
        if unknown:
            raise ValueError(f"unknown metric selections {unknown}; choose from {list(METRIC_NAMES)}")
        return value


class AblationToggles(BaseModel):
    """Which parts of CAF are switched on; h overrides flow.h when set."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    acceleration_on: bool = True
    ivc_on: bool = True
    reflow_on: bool = True
    h: Optional[float] = None

    @classmethod
    def from_label(cls, label: str) -> "AblationToggles":
        if label not in ABLATION_PRESETS:
            raise ConfigError(f"Unknown ablation label '{label}'. Available: {sorted(ABLATION_PRESETS)}")
        return cls(**ABLATION_PRESETS[label])


class ExperimentConfig(BaseModel):
    """One experiment: data, training phases, flow, metrics and ablation toggles."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: Literal[1] = CONFIG_SCHEMA_VERSION
    seed: int = Field(0, ge=0)
    dim: int = Field(2, ge=1)
    source: Union[str, DistributionSpec] = "gaussian"
    target: Union[str, DistributionSpec] = "two_moons"
    n_pairs: int = Field(REFLOW_DEFAULTS["n_pairs"], ge=2)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    rf_train: TrainConfig = Field(default_factory=TrainConfig)
    caf_train: TrainConfig = Field(default_factory=TrainConfig)
    reflow: ReflowConfig = Field(default_factory=ReflowConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    ablation: AblationToggles = Field(default_factory=AblationToggles)
    output_dir: str = RUNTIME_DEFAULTS["out_root"]

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        src, tgt = self.source_spec(), self.target_spec()
        if src.dim != tgt.dim:
            raise ValueError(f"source dim {src.dim} != target dim {tgt.dim}")
        sizes = {"n_pairs": self.n_pairs}
        if self.ablation.reflow_on:
            sizes["reflow.n_pairs"] = self.reflow.n_pairs
        for key, size in sizes.items():
            train_size = size - self.metrics.n_heldout
            if train_size < 1:
                raise ValueError(f"{key}={size} leaves no training pairs after n_heldout={self.metrics.n_heldout}")
            for phase, cfg in (("rf_train", self.rf_train), ("caf_train", self.caf_train)):
                if cfg.batch_size > train_size:
                    raise ValueError(f"{phase}.batch_size {cfg.batch_size} exceeds the {train_size} training pairs of {key}")
        if "sliced_wasserstein" in self.metrics.selections and self.metrics.n_eval < METRIC_DEFAULTS["min_sw_samples"]:
            raise ValueError(f"sliced_wasserstein needs metrics.n_eval >= {METRIC_DEFAULTS['min_sw_samples']}")
        return self

    def _resolve(self, ref: Union[str, DistributionSpec]) -> DistributionSpec:
        if isinstance(ref, DistributionSpec):
            return ref
        try:
            return preset(ref, self.dim)
        except DistributionError as e:
            raise ValueError(str(e)) from e

    def source_spec(self) -> DistributionSpec:
        return self._resolve(self.source)

    def target_spec(self) -> DistributionSpec:
        return self._resolve(self.target)

    @property
    def h(self) -> float:
        return self.flow.h if self.ablation.h is None else self.ablation.h

    def effective_flow(self) -> FlowConfig:
        return FlowConfig(**{**self.flow.model_dump(), "h": self.h})

    def effective_caf_train(self) -> TrainConfig:
        """CAF training config with the run's flow and IVC toggle applied."""
        data = self.caf_train.model_dump()
        data.update(flow=self.effective_flow().model_dump(), ivc=self.ablation.ivc_on, seed=self.seed)
        return TrainConfig.model_validate(data)

    def effective_rf_train(self) -> TrainConfig:
        data = self.rf_train.model_dump()
        data.update(flow=self.effective_flow().model_dump(), seed=self.seed)
        return TrainConfig.model_validate(data)

    def with_overrides(self, **changes: Any) -> "ExperimentConfig":
        """Re-validated copy with dotted-path overrides, e.g. {'flow.h': 2.0}."""
        data = self.model_dump()
        for key, value in changes.items():
            if value is None:
                continue
            node = data
            *parents, leaf = key.split(".")
            for part in parents:
                node = node[part]
            node[leaf] = value
        return validate_config(data)


def validate_config(data: Dict[str, Any]) -> ExperimentConfig:
    """Validate a raw mapping, turning pydantic errors into ConfigError."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    version = data.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}; this build reads version {CONFIG_SCHEMA_VERSION}")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate a YAML experiment file."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"could not parse {path}: {e}") from e
    return validate_config(data or {})


def config_payload(config: ExperimentConfig) -> Dict[str, Any]:
    """JSON-ready config without the output directory (which must not affect the hash)."""
    return config.model_dump(mode="json", exclude={"output_dir"})


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form; stable under key reordering."""
    return sha256_hex(canonical_json_bytes(config_payload(config)))


def dump_config(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.model_dump(mode="json"), f, sort_keys=True)
    return path
