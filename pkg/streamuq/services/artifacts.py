"""
Result Artifacts

Readers and writers for everything a run leaves on disk. Trial-scoped files
live under <out>/<strategy>/trial_<k>/; run-level tables sit at <out>/.

Trial files:
- shots.csv: per-shot shot_id, strategy, trial, mae, mse, mape, mean_sigma, wall_ms, n_windows
- predictions.csv: per-window shot_id, end_index, y_true, y_pred, sigma
- weights.csv: per-shot mean fusion weight of every member
- failures.csv: shot_id and index of every member whose update failed
- calibration.csv: long-format coverage curve of every member and of the fused
  prediction at every evaluation checkpoint (model, shot_id, level, coverage, area)

All floats are written with %.17g so files reload bit-exactly and reruns
produce identical bytes.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from core.errors import DataError, UsageError
from core.resilience import with_retry_sync
from services.calibration import CalibrationCurve
from services.metrics import CURVE_COLUMNS, MetricReport, RecCurve, moving_average

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
SHOT_COLUMNS = ["shot_id", "strategy", "trial", "mae", "mse", "mape", "mean_sigma", "wall_ms", "n_windows"]
PREDICTION_COLUMNS = ["shot_id", "end_index", "y_true", "y_pred", "sigma"]


def trial_dir(root: Path, strategy: str, trial: int) -> Path:
    return Path(root) / strategy / f"trial_{trial}"


@with_retry_sync(max_attempts=3)
def write_frame(frame: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def _json_safe(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, Path):
        return str(value)
    return value


@with_retry_sync(max_attempts=3)
def write_json(payload: Any, path: Path) -> Path:
    """Sorted keys and NaN written as null, so the file is valid and stable JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_safe(payload), indent=2, sort_keys=True) + "\n")
    return path


# =============================================================================
# Trial Files
# =============================================================================

def write_trial(report: MetricReport, directory: Path) -> Path:
    directory = Path(directory)
    shots = pd.DataFrame({
        "shot_id": report.shot_ids,
        "strategy": report.strategy,
        "trial": report.trial,
        "mae": report.mae,
        "mse": report.mse,
        "mape": report.mape,
        "mean_sigma": report.mean_sigma,
        "wall_ms": report.wall_ms,
        "n_windows": report.n_windows,
    }, columns=SHOT_COLUMNS)
    write_frame(shots, directory / "shots.csv")

    predictions = pd.DataFrame({
        "shot_id": report.window_shot_ids,
        "end_index": report.window_end_indices,
        "y_true": report.y_true,
        "y_pred": report.y_pred,
        "sigma": report.sigma,
    }, columns=PREDICTION_COLUMNS)
    write_frame(predictions, directory / "predictions.csv")

    n_members = report.member_weights.shape[1] if report.member_weights.ndim == 2 else 0
    weights = pd.DataFrame(
        report.member_weights.reshape(report.n_shots, n_members),
        columns=[f"member_{i}" for i in range(n_members)],
    )
    weights.insert(0, "shot_id", report.shot_ids)
    write_frame(weights, directory / "weights.csv")

    failures = pd.DataFrame(
        [(row[0], member) for row in report.failed_members for member in row[1:]],
        columns=["shot_id", "member"],
    )
    write_frame(failures, directory / "failures.csv")
    write_frame(report.checkpoint_curves.reindex(columns=CURVE_COLUMNS), directory / "calibration.csv")

    write_json({"strategy": report.strategy, "trial": report.trial, "seed": report.seed}, directory / "trial.json")
    return directory


def _read_csv(path: Path, columns: Sequence[str]) -> pd.DataFrame:
    if not path.exists():
        raise UsageError(f"missing result file {path}")
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"{path}: {e}") from e
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    return frame


def read_trial(directory: Path) -> MetricReport:
    """Rebuild a MetricReport from the files written by write_trial."""
    directory = Path(directory)
    meta_path = directory / "trial.json"
    if not meta_path.exists():
        raise UsageError(f"{directory} is not a trial directory")
    meta = json.loads(meta_path.read_text())
    shots = _read_csv(directory / "shots.csv", SHOT_COLUMNS)
    predictions = _read_csv(directory / "predictions.csv", PREDICTION_COLUMNS)
    weights = _read_csv(directory / "weights.csv", ["shot_id"])
    failures = _read_csv(directory / "failures.csv", ["shot_id", "member"])
    curves = _read_csv(directory / "calibration.csv", CURVE_COLUMNS)

    failed: Dict[int, List[int]] = {}
    for shot_id, member in failures[["shot_id", "member"]].itertuples(index=False):
        failed.setdefault(int(shot_id), []).append(int(member))

    return MetricReport(
        strategy=meta["strategy"],
        trial=int(meta["trial"]),
        seed=int(meta["seed"]),
        shot_ids=shots["shot_id"].to_numpy(dtype=np.int64),
        mae=shots["mae"].to_numpy(dtype=np.float64),
        mse=shots["mse"].to_numpy(dtype=np.float64),
        mape=shots["mape"].to_numpy(dtype=np.float64),
        mean_sigma=shots["mean_sigma"].to_numpy(dtype=np.float64),
        n_windows=shots["n_windows"].to_numpy(dtype=np.int64),
        wall_ms=shots["wall_ms"].to_numpy(dtype=np.float64),
        member_weights=weights.drop(columns="shot_id").to_numpy(dtype=np.float64),
        window_shot_ids=predictions["shot_id"].to_numpy(dtype=np.int64),
        window_end_indices=predictions["end_index"].to_numpy(dtype=np.int64),
        y_true=predictions["y_true"].to_numpy(dtype=np.float64),
        y_pred=predictions["y_pred"].to_numpy(dtype=np.float64),
        sigma=predictions["sigma"].to_numpy(dtype=np.float64),
        failed_members=[[shot_id, *members] for shot_id, members in sorted(failed.items())],
        checkpoint_curves=curves[CURVE_COLUMNS],
    )


def read_results(root: Path, strategies: Optional[Sequence[str]] = None) -> Dict[str, List[MetricReport]]:
    """Every trial under a results directory, grouped by strategy in name order."""
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"results directory {root} does not exist")
    reports: Dict[str, List[MetricReport]] = {}
    for meta_path in sorted(root.glob("*/trial_*/trial.json")):
        report = read_trial(meta_path.parent)
        if strategies is None or report.strategy in strategies:
            reports.setdefault(report.strategy, []).append(report)
    for runs in reports.values():
        runs.sort(key=lambda r: r.trial)
    if strategies is not None:
        reports = {name: reports[name] for name in strategies if name in reports}
    return reports


# =============================================================================
# Run-Level Tables
# =============================================================================

def write_summary(rows: Sequence[dict], root: Path) -> None:
    write_frame(pd.DataFrame(list(rows)), Path(root) / "summary.csv")
    write_json(list(rows), Path(root) / "summary.json")


def write_rec(curves: Mapping[str, RecCurve], path: Path) -> Path:
    """Long-format REC table: one row per (curve, tolerance)."""
    frames = [
        pd.DataFrame({"curve": name, "tolerance": curve.tolerances, "accuracy": curve.accuracy, "aoc": curve.aoc})
        for name, curve in curves.items()
    ]
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["curve", "tolerance", "accuracy", "aoc"])
    return write_frame(frame, path)


def write_calibration(curves: Mapping[str, CalibrationCurve], path: Path) -> Path:
    """Pooled curve per strategy: one row per (strategy, nominal level)."""
    frames = [
        pd.DataFrame({"strategy": name, "expected": curve.levels, "observed": curve.coverage, "area": curve.area})
        for name, curve in curves.items()
    ]
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["strategy", "expected", "observed", "area"])
    return write_frame(frame, path)


def mae_per_shot(reports: Mapping[str, Sequence[MetricReport]], window: int = 20) -> pd.DataFrame:
    """Per-strategy mean per-shot MAE across trials, with its trailing moving average."""
    frames = []
    for strategy, runs in reports.items():
        runs = [r for r in runs if not r.empty]
        if not runs:
            continue
        per_trial = pd.concat(
            [pd.Series(r.mae, index=r.shot_ids, name=r.trial) for r in runs], axis=1
        )
        mean = per_trial.mean(axis=1).sort_index()
        frames.append(pd.DataFrame({
            "strategy": strategy,
            "shot_id": mean.index.to_numpy(dtype=np.int64),
            "mae": mean.to_numpy(),
            "mae_moving_average": moving_average(mean.to_numpy(), window),
        }))
    if not frames:
        return pd.DataFrame(columns=["strategy", "shot_id", "mae", "mae_moving_average"])
    return pd.concat(frames, ignore_index=True)
