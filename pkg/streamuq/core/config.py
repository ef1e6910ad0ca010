try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from core.errors import ConfigurationError
from models import LayerSpec, SyntheticStreamConfig, build_layer_specs


class Settings(BaseSettings):
    ENVIRONMENT: str = "development"
    LOG_LEVEL: str = "INFO"

    # Error Tracking
    SENTRY_DSN: Optional[str] = None

    # Parallelism (results never depend on these)
    N_JOBS: int = 1
    MEMBER_N_JOBS: int = 1

    RESULTS_DIR: str = "results"

    model_config = SettingsConfigDict(
        env_file=[".env", "../.env"],
        extra="ignore"
    )


settings = Settings()


# =============================================================================
# Experiment Configuration (TOML file, unknown keys rejected)
# =============================================================================

Strategy = Literal["static", "single_online", "naive_ensemble", "uq_ensemble"]

ALL_STRATEGIES: Tuple[str, ...] = ("static", "single_online", "naive_ensemble", "uq_ensemble")

# conv filters / dense units; the scalar output is produced by the GP head
NETWORK_PRESETS = {
    "desk": {"conv_filters": [16, 8], "dense_units": [32, 32]},
    "full": {"conv_filters": [128, 128, 64], "dense_units": [128, 128]},
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    csv_path: Optional[Path] = None
    synthetic: Optional[SyntheticStreamConfig] = None

    @model_validator(mode="after")
    def _one_source(self) -> "DataConfig":
        if (self.csv_path is None) == (self.synthetic is None):
            raise ValueError("exactly one of data.csv_path or data.synthetic must be set")
        return self


class PreprocessConfig(_Section):
    stuck_threshold: float = Field(default=1e-3, gt=0.0)
    standardize: bool = True


class WindowConfig(_Section):
    length: int = Field(default=100, ge=1)
    stride: int = Field(default=1, ge=1)
    # stride of the pretraining windows (online buffers always use `stride`)
    train_stride: int = Field(default=1, ge=1)


class SplitConfig(_Section):
    # leading shots (after preprocessing) that form the pretraining range
    pretrain_shots: int = Field(default=100, ge=3)
    ratios: Tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0

    @model_validator(mode="after")
    def _ratios_sum(self) -> "SplitConfig":
        if abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) < 0:
            raise ValueError("split ratios must be non-negative and sum to 1")
        return self


class NetworkConfig(_Section):
    preset: Literal["desk", "full"] = "desk"
    conv_filters: Optional[List[int]] = None
    dense_units: Optional[List[int]] = None
    kernel_size: int = Field(default=3, ge=1)
    pool: int = Field(default=2, ge=1)
    dropout_rate: float = Field(default=0.05, ge=0.0, lt=1.0)
    penalty_weight: float = Field(default=0.1, ge=0.0)
    bilip_max_pairs: int = Field(default=64, ge=1)
    learning_rate: float = Field(default=1e-4, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(default=1e-8, gt=0.0)
    batch_size: int = Field(default=64, ge=1)
    max_epochs: int = Field(default=100, ge=0)
    patience: int = Field(default=5, ge=1)

    def layer_specs(self) -> List[LayerSpec]:
        preset = NETWORK_PRESETS[self.preset]
        return build_layer_specs(
            conv_filters=self.conv_filters if self.conv_filters is not None else preset["conv_filters"],
            dense_units=self.dense_units if self.dense_units is not None else preset["dense_units"],
            kernel_size=self.kernel_size,
            pool=self.pool,
            dropout_rate=self.dropout_rate,
        )


class DgpaConfig(_Section):
    n_features: int = Field(default=512, ge=1)
    length_scale: float = Field(default=1.0, gt=0.0)
    ridge: float = Field(default=1.0, gt=0.0)
    noise_floor: float = Field(default=1e-4, ge=0.0)  # variance floor


class CalibrationConfig(_Section):
    min_windows: int = Field(default=50, ge=10)
    n_levels: int = Field(default=99, ge=1)


class EnsembleConfig(_Section):
    buffer_schedule: List[int] = Field(default_factory=lambda: [1, 5, 20, 40, 200])
    single_online_buffer: int = Field(default=5, ge=1)
    # windows per online fine-tuning pass; 0 trains on the whole buffer
    finetune_max_windows: int = Field(default=0, ge=0)
    strategies: List[Strategy] = Field(default_factory=lambda: list(ALL_STRATEGIES))

    @model_validator(mode="after")
    def _check(self) -> "EnsembleConfig":
        if not self.strategies:
            raise ValueError("at least one strategy is required")
        if not self.buffer_schedule or min(self.buffer_schedule) < 1:
            raise ValueError("buffer_schedule must hold positive capacities")
        return self


class RunConfig(_Section):
    trials: int = Field(default=10, ge=1)
    master_seed: int = Field(default=0, ge=0)
    seeds: Optional[List[int]] = None
    checkpoint_interval: int = Field(default=0, ge=0)  # 0 disables member checkpoints
    record_timings: bool = False

    @model_validator(mode="after")
    def _seed_list(self) -> "RunConfig":
        if self.seeds is None:
            from core.seeding import trial_seeds
            self.seeds = trial_seeds(self.master_seed, self.trials)
        if len(self.seeds) != self.trials:
            raise ValueError("run.seeds length must equal run.trials")
        return self


class ExperimentConfig(_Section):
    data: DataConfig
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    window: WindowConfig = Field(default_factory=WindowConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    dgpa: DgpaConfig = Field(default_factory=DgpaConfig)
    calibration: CalibrationConfig = Field(default_factory=CalibrationConfig)
    ensemble: EnsembleConfig = Field(default_factory=EnsembleConfig)
    run: RunConfig = Field(default_factory=RunConfig)
    output_dir: Path = Path(settings.RESULTS_DIR)

    @property
    def base_checkpoint(self) -> Path:
        return self.output_dir / "base_model.npz"

    def with_overrides(
        self,
        output_dir: Optional[Path] = None,
        master_seed: Optional[int] = None,
        strategies: Optional[List[str]] = None,
        trials: Optional[int] = None,
    ) -> "ExperimentConfig":
        """Apply CLI overrides and re-validate; seeds are re-derived when seed or trials change."""
        raw = self.model_dump(mode="python")
        if output_dir is not None:
            raw["output_dir"] = output_dir
        if strategies is not None:
            raw["ensemble"]["strategies"] = strategies
        if master_seed is not None or trials is not None:
            if master_seed is not None:
                raw["run"]["master_seed"] = master_seed
            if trials is not None:
                raw["run"]["trials"] = trials
            raw["run"]["seeds"] = None
        return validate_experiment_config(raw)


def validate_experiment_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigurationError(f"invalid experiment config: {e}") from e


def load_experiment_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigurationError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid TOML: {e}") from e
    return validate_experiment_config(raw)
