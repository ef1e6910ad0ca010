"""
Shot Stream Data

Ingestion, cleaning, windowing and splitting of shot data, plus a synthetic
drifting stream that stands in for a real shot archive.

CSV schema (one row per time step, rows grouped by shot and time-ordered):

    shot_id,t,x1,...,xK,y

Usage:
    from services.stream_data import load_shots_csv, preprocess, windowize_many

    shots, report = preprocess(load_shots_csv("stream.csv"))
    batch = windowize_many(shots, window_length=100)
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import ValidationError
from scipy.signal import lfilter

from core.errors import ArgumentError, DataError, ParseError
from core.resilience import with_retry_sync
from core.seeding import make_rng
from models import PreprocessReport, ShotRecord, SyntheticStreamConfig, WindowBatch, WindowSet

logger = logging.getLogger(__name__)

MISSING_TOKENS = {"", "nan", "NaN", "NA", "null"}
CSV_FLOAT_FORMAT = "%.17g"


# =============================================================================
# CSV Ingestion
# =============================================================================

def csv_header(n_channels: int) -> List[str]:
    return ["shot_id", "t"] + [f"x{i}" for i in range(1, n_channels + 1)] + ["y"]


def _check_header(columns: Sequence[str]) -> int:
    columns = [c.strip() for c in columns]
    n_channels = len(columns) - 3
    if n_channels < 1 or columns != csv_header(n_channels):
        raise ParseError(f"expected header 'shot_id,t,x1,...,xK,y', got {','.join(columns)!r}", line=1)
    return n_channels


def _parse_column(name: str, cells: pd.Series, lines: np.ndarray, allow_missing: bool = True) -> np.ndarray:
    text = cells.str.strip()
    missing = text.isin(MISSING_TOKENS).to_numpy()
    numeric = pd.to_numeric(text.where(~missing), errors="coerce").to_numpy()
    bad = np.isnan(numeric) & ~missing
    if not allow_missing:
        bad |= missing
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ParseError(f"non-numeric value {cells.iloc[row]!r} in column '{name}'", line=int(lines[row]))
    values = np.full(len(text), np.nan)
    # numpy's str -> float conversion is correctly rounded
    values[~missing] = text.to_numpy()[~missing].astype(np.float64)
    return values


def load_shots_csv(path: Union[str, Path]) -> List[ShotRecord]:
    """One ShotRecord per shot_id; missing cells are kept as NaN for preprocess."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False, encoding="utf-8")
    except FileNotFoundError as e:
        raise DataError(f"shot file not found: {path}") from e
    except pd.errors.EmptyDataError as e:
        raise ParseError("file has no header row", line=1) from e
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise ParseError(f"malformed row: {e}", line=int(match.group(1)) if match else None) from e

    n_channels = _check_header(list(frame.columns))
    # blank lines are skipped but still counted, so errors name the physical line
    frame = frame.fillna("")
    blank = (frame == "").all(axis=1).to_numpy()
    lines = np.flatnonzero(~blank) + 2
    frame = frame[~blank]
    if frame.empty:
        logger.info(f"📄 [StreamData] {path} holds a header only; no shots")
        return []

    shot_ids = _parse_column("shot_id", frame.iloc[:, 0], lines, allow_missing=False)
    times = _parse_column("t", frame.iloc[:, 1], lines, allow_missing=False)
    inputs = np.column_stack([_parse_column(f"x{i}", frame.iloc[:, 1 + i], lines) for i in range(1, n_channels + 1)])
    target = _parse_column("y", frame.iloc[:, -1], lines)

    if np.any(shot_ids != np.round(shot_ids)):
        row = int(np.flatnonzero(shot_ids != np.round(shot_ids))[0])
        raise ParseError("shot_id must be an integer", line=int(lines[row]))

    # group boundaries: shot ids must arrive in strictly increasing contiguous runs
    starts = np.flatnonzero(np.concatenate([[True], shot_ids[1:] != shot_ids[:-1]]))
    run_ids = shot_ids[starts]
    if np.any(np.diff(run_ids) <= 0):
        row = int(starts[1:][np.diff(run_ids) <= 0][0])
        raise ParseError(f"shot {int(shot_ids[row])} is out of order or not contiguous", line=int(lines[row]))
    ends = np.append(starts[1:], len(shot_ids))

    shots = []
    for start, end in zip(starts, ends):
        if np.any(np.diff(times[start:end]) <= 0):
            row = start + 1 + int(np.flatnonzero(np.diff(times[start:end]) <= 0)[0])
            raise ParseError(f"time steps of shot {int(shot_ids[start])} are not increasing", line=int(lines[row]))
        shots.append(ShotRecord(
            shot_id=int(shot_ids[start]),
            inputs=np.ascontiguousarray(inputs[start:end].T),
            target=target[start:end].copy(),
        ))
    logger.info(f"📄 [StreamData] Loaded {len(shots)} shots ({n_channels} channels) from {path}")
    return shots


@with_retry_sync(max_attempts=3)
def write_shots_csv(path: Union[str, Path], shots: Sequence[ShotRecord], n_channels: Optional[int] = None) -> Path:
    """Write shots in the load_shots_csv schema; %.17g keeps every float bit-exact on reload."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if n_channels is None:
        n_channels = shots[0].n_channels if shots else 9
    header = csv_header(n_channels)
    if shots:
        frame = pd.concat([
            pd.DataFrame({
                "shot_id": np.full(shot.length, shot.shot_id, dtype=np.int64),
                "t": np.arange(shot.length, dtype=np.int64),
                **{f"x{i + 1}": shot.inputs[i] for i in range(n_channels)},
                "y": shot.target,
            })
            for shot in shots
        ], ignore_index=True)
    else:
        frame = pd.DataFrame(columns=header)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"💾 [StreamData] Wrote {len(shots)} shots to {path}")
    return path


# =============================================================================
# Preprocessing
# =============================================================================

def is_stuck(shot: ShotRecord, threshold: float = 1e-3) -> bool:
    """Stuck sensor: target both nearly constant and nearly zero."""
    return bool(np.std(shot.target) < threshold and np.mean(np.abs(shot.target)) < threshold)


def preprocess(shots: Sequence[ShotRecord], stuck_threshold: float = 1e-3) -> Tuple[List[ShotRecord], PreprocessReport]:
    report = PreprocessReport()
    kept = []
    for shot in shots:
        if not (np.all(np.isfinite(shot.inputs)) and np.all(np.isfinite(shot.target))):
            report.dropped_nan += 1
        elif is_stuck(shot, stuck_threshold):
            report.dropped_stuck += 1
        else:
            kept.append(shot)
    report.kept = len(kept)
    if report.dropped:
        logger.info(
            f"🧹 [StreamData] Dropped {report.dropped} shots "
            f"({report.dropped_nan} missing values, {report.dropped_stuck} stuck); kept {report.kept}"
        )
    return kept, report


@dataclass
class Standardizer:
    """Per-channel input standardization fit on pretraining shots only."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, shots: Sequence[ShotRecord]) -> "Standardizer":
        if not shots:
            raise ArgumentError("cannot fit a standardizer on zero shots")
        if any(shot.standardized for shot in shots):
            raise DataError("standardizer must be fit on raw shots")
        stacked = np.concatenate([shot.inputs for shot in shots], axis=1)
        std = stacked.std(axis=1)
        return cls(mean=stacked.mean(axis=1), std=np.where(std > 0, std, 1.0))

    def apply(self, shot: ShotRecord) -> ShotRecord:
        if shot.standardized:
            raise DataError(f"shot {shot.shot_id} is already standardized")
        return ShotRecord(
            shot_id=shot.shot_id,
            inputs=(shot.inputs - self.mean[:, None]) / self.std[:, None],
            target=shot.target,
            standardized=True,
        )

    def apply_all(self, shots: Sequence[ShotRecord]) -> List[ShotRecord]:
        return [self.apply(shot) for shot in shots]


# =============================================================================
# Windowing & Splitting
# =============================================================================

def empty_batch(window_length: int, n_channels: int) -> WindowBatch:
    return WindowBatch(
        inputs=np.zeros((0, window_length, n_channels)),
        targets=np.zeros(0),
        shot_ids=np.zeros(0, dtype=np.int64),
        end_indices=np.zeros(0, dtype=np.int64),
    )


def windowize(shot: ShotRecord, window_length: int = 100, stride: int = 1) -> WindowBatch:
    """
    Sliding windows over one shot. Window k covers steps [k*stride, k*stride + W)
    and is labelled with the target at its last step. Windows never cross shots.

    The inputs are a read-only strided view of the shot, not a copy.
    """
    if window_length < 1 or stride < 1:
        raise ArgumentError("window_length and stride must be positive")
    if shot.length < window_length:
        logger.warning(
            f"⚠️ [StreamData] Shot {shot.shot_id} has {shot.length} steps, "
            f"shorter than the {window_length}-step window; no windows"
        )
        return empty_batch(window_length, shot.n_channels)
    # (L - W + 1, C, W) -> (N, W, C)
    views = sliding_window_view(shot.inputs.T, window_length, axis=0)[::stride]
    ends = np.arange(window_length - 1, shot.length)[::stride]
    return WindowBatch(
        inputs=views.transpose(0, 2, 1),
        targets=shot.target[ends].copy(),
        shot_ids=np.full(len(ends), shot.shot_id, dtype=np.int64),
        end_indices=ends.astype(np.int64),
    )


def windowize_many(shots: Sequence[ShotRecord], window_length: int = 100, stride: int = 1) -> WindowSet:
    return WindowSet([windowize(shot, window_length, stride) for shot in shots])


def split_sizes(n: int, ratios: Tuple[float, float, float] = (0.70, 0.15, 0.15)) -> Tuple[int, int, int]:
    """Floor train, floor validation, remainder to test."""
    n_train = int(np.floor(n * ratios[0] + 1e-9))
    n_val = int(np.floor(n * ratios[1] + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split(
    shots: Sequence[ShotRecord],
    ratios: Tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> Tuple[List[ShotRecord], List[ShotRecord], List[ShotRecord]]:
    """Shot-level random partition; every part keeps arrival order."""
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ArgumentError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    n = len(shots)
    if n < 3:
        raise ArgumentError(f"need at least 3 shots to split into train/validation/test, got {n}")
    n_train, n_val, _ = split_sizes(n, ratios)
    order = np.random.default_rng(seed).permutation(n)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple([shots[i] for i in np.sort(part)] for part in parts)


# =============================================================================
# Synthetic Drifting Stream
# =============================================================================

_MAP_TAG, _EVENT_TAG, _SHOT_TAG = 1, 2, 3


@dataclass
class TargetMap:
    """y = v . tanh(A x + c) / sqrt(width), plus additive channel offsets on x."""
    weight: np.ndarray   # (width, C)
    bias: np.ndarray     # (width,)
    readout: np.ndarray  # (width,)
    offsets: np.ndarray  # (C,)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        width = self.readout.shape[0]
        return self.readout @ np.tanh(self.weight @ x + self.bias[:, None]) / np.sqrt(width)

    def shifted(self, delta: "TargetMap", scale: float) -> "TargetMap":
        return TargetMap(
            weight=self.weight + scale * delta.weight,
            bias=self.bias + scale * delta.bias,
            readout=self.readout + scale * delta.readout,
            offsets=self.offsets + scale * delta.offsets,
        )


def _draw_map(rng: np.random.Generator, width: int, n_channels: int, offset_scale: float) -> TargetMap:
    return TargetMap(
        weight=rng.normal(size=(width, n_channels)),
        bias=rng.normal(size=width),
        readout=rng.normal(size=width),
        offsets=offset_scale * rng.normal(size=n_channels),
    )


def target_map_at(config: SyntheticStreamConfig, shot_index: int) -> TargetMap:
    """
    The map in force for one shot: the base map plus every drift event reached
    so far. Abrupt events apply fully from their shot on; gradual events ramp
    in linearly over `span` shots.
    """
    base = _draw_map(make_rng(config.seed, _MAP_TAG), config.map_width, config.n_channels, 0.0)
    current = base
    for k, event in enumerate(config.drift_schedule):
        if event.kind == "none" or shot_index < event.shot_index:
            continue
        delta = _draw_map(make_rng(config.seed, _EVENT_TAG, k), config.map_width, config.n_channels, config.covariate_shift)
        if event.kind == "abrupt":
            fraction = 1.0
        else:
            fraction = min(1.0, (shot_index - event.shot_index + 1) / event.span)
        current = current.shifted(delta, event.magnitude * fraction)
    return current


def ar1_channels(rng: np.random.Generator, n_channels: int, length: int, coefficient: float) -> np.ndarray:
    """Stationary AR(1) processes with unit variance, (C, L)."""
    innovations = rng.standard_normal((n_channels, length))
    gain = np.sqrt(1.0 - coefficient ** 2)
    # first sample drawn from the stationary distribution
    innovations[:, 0] /= gain
    return lfilter([gain], [1.0, -coefficient], innovations, axis=1)


def generate_shot(config: SyntheticStreamConfig, shot_index: int) -> ShotRecord:
    rng = make_rng(config.seed, _SHOT_TAG, shot_index)
    target_map = target_map_at(config, shot_index)
    inputs = ar1_channels(rng, config.n_channels, config.shot_length, config.ar_coefficient)
    inputs = inputs + target_map.offsets[:, None]
    target = target_map(inputs) + config.noise_std * rng.standard_normal(config.shot_length)
    return ShotRecord(shot_id=shot_index, inputs=inputs, target=target)


def generate_synthetic_stream(config: Union[SyntheticStreamConfig, dict]) -> List[ShotRecord]:
    """Deterministic in `config.seed`; each shot draws from its own (seed, shot) stream."""
    if not isinstance(config, SyntheticStreamConfig):
        try:
            config = SyntheticStreamConfig.model_validate(config)
        except ValidationError as e:
            raise ArgumentError(f"invalid synthetic stream config: {e}") from e
    shots = [generate_shot(config, i) for i in range(config.n_shots)]
    logger.info(
        f"🌊 [StreamData] Generated {len(shots)} synthetic shots "
        f"({len(config.drift_schedule)} drift events, seed {config.seed})"
    )
    return shots
