"""
Domain Models

Pydantic schemas for the declarative parts of an experiment (layer specs,
synthetic drift schedules) and dataclasses for the array-carrying records that
flow through the online loop.
"""

from dataclasses import dataclass, field
from typing import Iterator, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


# =============================================================================
# Network Layout (Pydantic)
# =============================================================================

LayerKind = Literal["conv1d", "maxpool1d", "relu", "dropout", "dense"]


class LayerSpec(BaseModel):
    """
    One layer of the feature network.

    Only the fields relevant to `kind` are read:
    - conv1d: filters, kernel_size, stride (default 1)
    - maxpool1d: pool, stride (default = pool)
    - dropout: rate
    - dense: units
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: LayerKind
    filters: Optional[int] = Field(default=None, ge=1)
    kernel_size: int = Field(default=3, ge=1)
    stride: Optional[int] = Field(default=None, ge=1)
    pool: int = Field(default=2, ge=1)
    rate: float = Field(default=0.05, ge=0.0, lt=1.0)
    units: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check_kind_fields(self) -> "LayerSpec":
        if self.kind == "conv1d" and self.filters is None:
            raise ValueError("conv1d layer requires 'filters'")
        if self.kind == "dense" and self.units is None:
            raise ValueError("dense layer requires 'units'")
        return self

    @property
    def effective_stride(self) -> int:
        if self.stride is not None:
            return self.stride
        return self.pool if self.kind == "maxpool1d" else 1


def conv_block(filters: int, kernel_size: int = 3, pool: int = 2) -> List[LayerSpec]:
    """Conv1D -> MaxPool1D -> ReLU."""
    return [
        LayerSpec(kind="conv1d", filters=filters, kernel_size=kernel_size, stride=1),
        LayerSpec(kind="maxpool1d", pool=pool, stride=pool),
        LayerSpec(kind="relu"),
    ]


def dense_block(units: int, dropout_rate: float = 0.05) -> List[LayerSpec]:
    """Dense -> ReLU -> Dropout."""
    return [
        LayerSpec(kind="dense", units=units),
        LayerSpec(kind="relu"),
        LayerSpec(kind="dropout", rate=dropout_rate),
    ]


def build_layer_specs(
    conv_filters: List[int],
    dense_units: List[int],
    kernel_size: int = 3,
    pool: int = 2,
    dropout_rate: float = 0.05,
) -> List[LayerSpec]:
    specs: List[LayerSpec] = []
    for filters in conv_filters:
        specs.extend(conv_block(filters, kernel_size, pool))
    for units in dense_units:
        specs.extend(dense_block(units, dropout_rate))
    return specs


# =============================================================================
# Synthetic Stream (Pydantic)
# =============================================================================

class DriftEvent(BaseModel):
    """A change of the target map starting at `shot_index`."""
    model_config = ConfigDict(extra="forbid")

    shot_index: int = Field(ge=0)
    kind: Literal["abrupt", "gradual", "none"]
    magnitude: float = 1.0
    span: int = Field(default=50, ge=1)  # gradual events only


class SyntheticStreamConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_shots: int = Field(default=300, ge=0)
    shot_length: int = Field(default=1020, ge=1)
    n_channels: int = Field(default=9, ge=1)
    drift_schedule: List[DriftEvent] = Field(default_factory=list)
    noise_std: float = Field(default=0.02, ge=0.0)
    seed: int = Field(default=0, ge=0)
    ar_coefficient: float = Field(default=0.95, gt=-1.0, lt=1.0)
    map_width: int = Field(default=16, ge=1)
    # scale of the channel-mean shift each drift event adds to the inputs;
    # 0 keeps the inputs zero-mean so drift only changes the target map
    covariate_shift: float = Field(default=0.0, ge=0.0)

    @model_validator(mode="after")
    def _check_schedule(self) -> "SyntheticStreamConfig":
        indices = [event.shot_index for event in self.drift_schedule]
        if indices != sorted(indices):
            raise ValueError("drift_schedule indices must be sorted")
        if any(i >= self.n_shots for i in indices):
            raise ValueError("drift_schedule indices must lie within [0, n_shots)")
        return self


# =============================================================================
# Shot Data (Dataclasses)
# =============================================================================

@dataclass
class ShotRecord:
    """
    One discharge: `inputs` is channels x time, `target` is the deflection
    series of the same length.
    """
    shot_id: int
    inputs: np.ndarray
    target: np.ndarray
    standardized: bool = False

    @property
    def length(self) -> int:
        return int(self.target.shape[0])

    @property
    def n_channels(self) -> int:
        return int(self.inputs.shape[0])


@dataclass
class WindowBatch:
    """Stacked windows: inputs (N, window_length, channels), targets (N,)."""
    inputs: np.ndarray
    targets: np.ndarray
    shot_ids: np.ndarray
    end_indices: np.ndarray

    def __len__(self) -> int:
        return int(self.targets.shape[0])

    def gather(self, index: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.inputs[index], self.targets[index]

    def chunks(self, size: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        for start in range(0, len(self), size):
            yield self.inputs[start:start + size], self.targets[start:start + size]


@dataclass
class WindowSet:
    """
    Windows of several shots kept as per-shot batches (usually strided views
    of the shot arrays), indexed as one sequence without copying them.
    """
    batches: List[WindowBatch]

    def __post_init__(self) -> None:
        self.batches = [b for b in self.batches if len(b)]
        self._offsets = np.cumsum([0] + [len(b) for b in self.batches])

    def __len__(self) -> int:
        return int(self._offsets[-1])

    @property
    def targets(self) -> np.ndarray:
        return np.concatenate([b.targets for b in self.batches]) if self.batches else np.zeros(0)

    @property
    def shot_ids(self) -> np.ndarray:
        return np.concatenate([b.shot_ids for b in self.batches]) if self.batches else np.zeros(0, dtype=np.int64)

    @property
    def end_indices(self) -> np.ndarray:
        return np.concatenate([b.end_indices for b in self.batches]) if self.batches else np.zeros(0, dtype=np.int64)

    def gather(self, index: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        index = np.asarray(index, dtype=np.int64)
        owner = np.searchsorted(self._offsets, index, side="right") - 1
        local = index - self._offsets[owner]
        inputs = np.stack([self.batches[o].inputs[i] for o, i in zip(owner, local)])
        targets = np.array([self.batches[o].targets[i] for o, i in zip(owner, local)])
        return inputs, targets

    def chunks(self, size: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        for batch in self.batches:
            yield from batch.chunks(size)

    def materialize(self) -> WindowBatch:
        """One contiguous WindowBatch (copies every window)."""
        return WindowBatch(
            inputs=np.concatenate([b.inputs for b in self.batches]) if self.batches else np.zeros((0, 0, 0)),
            targets=self.targets,
            shot_ids=self.shot_ids,
            end_indices=self.end_indices,
        )


@dataclass
class PreprocessReport:
    kept: int = 0
    dropped_nan: int = 0
    dropped_stuck: int = 0

    @property
    def dropped(self) -> int:
        return self.dropped_nan + self.dropped_stuck


# =============================================================================
# Online Loop Results (Dataclasses)
# =============================================================================

@dataclass
class StepOutcome:
    """Everything observed while processing one shot."""
    shot_id: int
    member_means: np.ndarray     # (n_members, n_windows), NaN rows for excluded members
    member_sigmas: np.ndarray    # (n_members, n_windows)
    member_weights: np.ndarray   # (n_members, n_windows), zero for excluded members
    included: np.ndarray         # (n_members,) bool
    mean: np.ndarray             # fused, (n_windows,)
    sigma: np.ndarray            # fused, (n_windows,)
    targets: np.ndarray
    end_indices: np.ndarray
    wall_ms: float = 0.0
    failed_members: List[int] = field(default_factory=list)

    @property
    def abs_errors(self) -> np.ndarray:
        return np.abs(self.mean - self.targets)
