"""
Error & Uncertainty Metrics

Per-shot error metrics, REC curves with their area-over-curve, the
per-trial MetricReport, checkpoint calibration curves and the across-trial
summary table.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.stats import pearsonr

from core.errors import ArgumentError
from models import StepOutcome
from services.calibration import CalibrationCurve, CalibrationDataset, CoverageGrid, miscalibration_area

logger = logging.getLogger(__name__)

REC_POINTS = 200
MAPE_FLOOR = 1e-3
EPSILON_MAX_PERCENTILE = 95.0
BASELINE_STRATEGY = "single_online"
CALIBRATION_BASELINE = "static"


# =============================================================================
# Point Metrics
# =============================================================================

def _pair(predictions, targets):
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if predictions.size == 0 or predictions.size != targets.size:
        raise ArgumentError(f"need equal non-empty arrays, got {predictions.size} and {targets.size}")
    return predictions, targets


def mae(predictions, targets) -> float:
    predictions, targets = _pair(predictions, targets)
    return float(np.mean(np.abs(predictions - targets)))


def mse(predictions, targets) -> float:
    predictions, targets = _pair(predictions, targets)
    return float(np.mean((predictions - targets) ** 2))


def mape(predictions, targets, floor: float = MAPE_FLOOR) -> float:
    """100 * mean |y - ŷ| / max(|y|, floor)."""
    predictions, targets = _pair(predictions, targets)
    return float(100.0 * np.mean(np.abs(targets - predictions) / np.maximum(np.abs(targets), floor)))


def moving_average(series: Sequence[float], k: int = 20) -> np.ndarray:
    """Trailing mean over the last min(k, i+1) points."""
    if k < 1:
        raise ArgumentError(f"moving average window must be >= 1, got {k}")
    return pd.Series(np.asarray(series, dtype=np.float64)).rolling(window=k, min_periods=1).mean().to_numpy()


def uncertainty_error_correlation(mean_sigma: Sequence[float], shot_mae: Sequence[float]) -> float:
    """Pearson correlation of per-shot mean sigma and per-shot MAE; NaN when undefined."""
    x = np.asarray(mean_sigma, dtype=np.float64)
    y = np.asarray(shot_mae, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(pearsonr(x, y)[0])


# =============================================================================
# REC Curves
# =============================================================================

@dataclass
class RecCurve:
    tolerances: np.ndarray
    accuracy: np.ndarray
    aoc: float

    @property
    def epsilon_max(self) -> float:
        return float(self.tolerances[-1])


def rec_curve(abs_errors: Sequence[float], epsilon_max: float, n_points: int = REC_POINTS) -> RecCurve:
    """
    Accuracy (fraction of errors <= eps) on an even grid over [0, eps_max]
    and the normalized area over the curve.
    """
    errors = np.sort(np.abs(np.asarray(abs_errors, dtype=np.float64).ravel()))
    if errors.size == 0:
        raise ArgumentError("REC curve needs at least one error")
    if not epsilon_max > 0:
        raise ArgumentError(f"epsilon_max must be positive, got {epsilon_max}")
    tolerances = np.linspace(0.0, epsilon_max, n_points)
    accuracy = np.searchsorted(errors, tolerances, side="right") / errors.size
    aoc = float(trapezoid(1.0 - accuracy, tolerances) / epsilon_max)
    return RecCurve(tolerances=tolerances, accuracy=accuracy, aoc=aoc)


def shared_epsilon_max(abs_errors_by_strategy: Mapping[str, np.ndarray]) -> float:
    """95th percentile of the static baseline's errors (else the first strategy's)."""
    if not abs_errors_by_strategy:
        return 1.0
    key = CALIBRATION_BASELINE if CALIBRATION_BASELINE in abs_errors_by_strategy else next(iter(abs_errors_by_strategy))
    errors = np.asarray(abs_errors_by_strategy[key], dtype=np.float64)
    if errors.size == 0:
        return 1.0
    value = float(np.percentile(errors, EPSILON_MAX_PERCENTILE))
    if not value > 0:
        logger.warning(f"⚠️ [Metrics] Degenerate REC range from '{key}' errors; using 1.0")
        return 1.0
    return value


# =============================================================================
# Per-Trial Report
# =============================================================================

@dataclass
class MetricReport:
    """
    Results of one (strategy, trial) stream run.

    Per-shot arrays are aligned with `shot_ids`; window-level arrays hold the
    fused prequential predictions used for REC and calibration curves.
    """
    strategy: str
    trial: int
    seed: int
    shot_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    mae: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mse: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mape: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mean_sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_windows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    wall_ms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    member_weights: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    window_shot_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    window_end_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    y_true: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_pred: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    failed_members: List[List[int]] = field(default_factory=list)
    checkpoint_curves: pd.DataFrame = field(default_factory=lambda: empty_curves())

    @property
    def n_shots(self) -> int:
        return int(self.shot_ids.size)

    @property
    def empty(self) -> bool:
        return self.n_shots == 0

    @property
    def abs_errors(self) -> np.ndarray:
        return np.abs(self.y_pred - self.y_true)

    def weighted_mean(self, values: np.ndarray) -> float:
        if self.empty or self.n_windows.sum() == 0:
            return float("nan")
        return float(np.average(values, weights=self.n_windows))

    @property
    def aggregate_mae(self) -> float:
        return self.weighted_mean(self.mae)

    @property
    def aggregate_mse(self) -> float:
        return self.weighted_mean(self.mse)

    @property
    def aggregate_mape(self) -> float:
        return self.weighted_mean(self.mape)

    def rec(self, epsilon_max: float) -> Optional[RecCurve]:
        return rec_curve(self.abs_errors, epsilon_max) if self.y_true.size else None

    def calibration(self) -> Optional[CalibrationCurve]:
        try:
            return miscalibration_area(CalibrationDataset(self.y_pred, self.sigma, self.y_true), alpha=1.0)
        except ArgumentError:
            return None

    def correlation(self) -> float:
        return uncertainty_error_correlation(self.mean_sigma, self.mae)


# =============================================================================
# Checkpoint Calibration Curves
# =============================================================================

CURVE_COLUMNS = ["model", "shot_id", "level", "coverage", "area"]
BAND_COLUMNS = [
    "strategy", "model", "shot_id", "level",
    "coverage_mean", "coverage_std", "area_mean", "area_std", "n_trials",
]
FUSED_MODEL = "fused"


class CheckpointCurves:
    """
    Calibration curve of every member and of the fused prediction, each over
    the prequential windows seen since the previous checkpoint.

    A member left out of a shot's fusion contributes no windows for it.
    Segments below MIN_CALIBRATION_SAMPLES windows produce no curve.
    """

    def __init__(self, n_members: int, grid: Optional[CoverageGrid] = None):
        self.grid = grid or CoverageGrid()
        self.models = [f"member_{i}" for i in range(n_members)] + [FUSED_MODEL]
        self._segments: Dict[str, list] = {name: [] for name in self.models}
        self._frames: List[pd.DataFrame] = []

    @property
    def pending(self) -> bool:
        return any(self._segments.values())

    def add(self, outcome: StepOutcome) -> None:
        if outcome.targets.size == 0:
            return
        for i in np.flatnonzero(outcome.included):
            self._segments[self.models[i]].append((outcome.member_means[i], outcome.member_sigmas[i], outcome.targets))
        self._segments[FUSED_MODEL].append((outcome.mean, outcome.sigma, outcome.targets))

    def checkpoint(self, shot_id: int) -> None:
        for name in self.models:
            parts, self._segments[name] = self._segments[name], []
            if not parts:
                continue
            means, sigmas, targets = (np.concatenate(column) for column in zip(*parts))
            try:
                curve = miscalibration_area(CalibrationDataset(means, sigmas, targets), alpha=1.0, grid=self.grid)
            except ArgumentError as e:
                logger.debug(f"No {name} calibration curve at shot {shot_id}: {e}")
                continue
            self._frames.append(pd.DataFrame({
                "model": name,
                "shot_id": int(shot_id),
                "level": curve.levels,
                "coverage": curve.coverage,
                "area": curve.area,
            }, columns=CURVE_COLUMNS))

    def table(self) -> pd.DataFrame:
        if not self._frames:
            return empty_curves()
        return pd.concat(self._frames, ignore_index=True)


def empty_curves() -> pd.DataFrame:
    return pd.DataFrame(columns=CURVE_COLUMNS)


def calibration_curves(reports: Mapping[str, Sequence[MetricReport]]) -> pd.DataFrame:
    """Every trial's checkpoint curves in one long table, keyed by strategy and trial."""
    frames = [
        r.checkpoint_curves.assign(strategy=name, trial=r.trial)[["strategy", "trial", *CURVE_COLUMNS]]
        for name, runs in reports.items() for r in runs
        if not r.checkpoint_curves.empty
    ]
    if not frames:
        return pd.DataFrame(columns=["strategy", "trial", *CURVE_COLUMNS])
    return pd.concat(frames, ignore_index=True)


def calibration_bands(curves: pd.DataFrame) -> pd.DataFrame:
    """Across-trial mean and sample std of every (strategy, model, checkpoint, level) curve point."""
    if curves.empty:
        return pd.DataFrame(columns=BAND_COLUMNS)
    grouped = curves.groupby(["strategy", "model", "shot_id", "level"], sort=False)
    bands = grouped.agg(
        coverage_mean=("coverage", "mean"),
        coverage_std=("coverage", "std"),
        area_mean=("area", "mean"),
        area_std=("area", "std"),
        n_trials=("trial", "nunique"),
    ).reset_index()
    # a single trial has no spread
    bands[["coverage_std", "area_std"]] = bands[["coverage_std", "area_std"]].fillna(0.0)
    return bands[BAND_COLUMNS]


def shot_metrics(predictions: np.ndarray, targets: np.ndarray, sigma: np.ndarray) -> Dict[str, float]:
    return {
        "mae": mae(predictions, targets),
        "mse": mse(predictions, targets),
        "mape": mape(predictions, targets),
        "mean_sigma": float(np.mean(sigma)),
    }


# =============================================================================
# Summary Table
# =============================================================================

SUMMARY_METRICS = ("mae", "mse", "mape", "aoc", "miscalibration_area", "mean_sigma")
IMPROVEMENT_METRICS = ("mae", "mse", "mape", "aoc")


def mean_std(values: Sequence[float]) -> tuple:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(np.mean(arr)), std


def improvement(baseline: float, value: float) -> float:
    """100 * (baseline - value) / baseline."""
    if math.isnan(baseline) or math.isnan(value) or baseline == 0:
        return float("nan")
    return 100.0 * (baseline - value) / baseline


def trial_values(report: MetricReport, epsilon_max: float) -> Dict[str, float]:
    rec = report.rec(epsilon_max)
    calibration = report.calibration()
    return {
        "mae": report.aggregate_mae,
        "mse": report.aggregate_mse,
        "mape": report.aggregate_mape,
        "aoc": rec.aoc if rec else float("nan"),
        "miscalibration_area": calibration.area if calibration else float("nan"),
        "mean_sigma": report.weighted_mean(report.mean_sigma),
    }


def summarize(reports: Mapping[str, Sequence[MetricReport]], epsilon_max: Optional[float] = None) -> List[dict]:
    """
    One row per strategy: mean and sample std across trials of every metric,
    improvement of MAE/MSE/MAPE/AOC over the single-online baseline and of the
    miscalibration area over the static baseline, and the pooled per-shot
    sigma-MAE correlation.
    """
    if epsilon_max is None:
        epsilon_max = shared_epsilon_max({
            name: np.concatenate([r.abs_errors for r in runs]) if runs else np.zeros(0)
            for name, runs in reports.items()
        })

    rows = []
    for strategy, runs in reports.items():
        per_trial = [trial_values(report, epsilon_max) for report in runs]
        row = {"strategy": strategy, "trials": len(runs)}
        for metric in SUMMARY_METRICS:
            row[f"{metric}_mean"], row[f"{metric}_std"] = mean_std([values[metric] for values in per_trial])
        pooled_sigma = np.concatenate([r.mean_sigma for r in runs]) if runs else np.zeros(0)
        pooled_mae = np.concatenate([r.mae for r in runs]) if runs else np.zeros(0)
        row["sigma_mae_correlation"] = uncertainty_error_correlation(pooled_sigma, pooled_mae)
        rows.append(row)

    by_name = {row["strategy"]: row for row in rows}
    for row in rows:
        baseline = by_name.get(BASELINE_STRATEGY)
        for metric in IMPROVEMENT_METRICS:
            row[f"{metric}_improvement_pct"] = (
                improvement(baseline[f"{metric}_mean"], row[f"{metric}_mean"]) if baseline else float("nan")
            )
        static = by_name.get(CALIBRATION_BASELINE)
        row["calibration_improvement_pct"] = (
            improvement(static["miscalibration_area_mean"], row["miscalibration_area_mean"]) if static else float("nan")
        )
    logger.info(f"📊 [Metrics] Summarized {len(rows)} strategies (REC range {epsilon_max:.4g})")
    return rows
