"""
Experiment Runner

The four CLI commands:
- gen: write a synthetic drifting stream as CSV
- pretrain: train, calibrate and checkpoint the base model on the leading shots
- run: stream the remaining shots through every (strategy, trial) and emit results
- report: re-summarize an existing results directory

Data preparation is a pure function of the config, so `run` re-derives the
same shot split and input standardization that `pretrain` used instead of
storing them.
"""

import hashlib
import json
import logging
import platform
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from core.config import ALL_STRATEGIES, ExperimentConfig
from core.errors import ArgumentError, ConfigurationError, UsageError
from core.seeding import derive_seed
from models import PreprocessReport, ShotRecord
from services.artifacts import (
    mae_per_shot,
    read_results,
    write_calibration,
    write_frame,
    write_json,
    write_rec,
    write_summary,
)
from services.calibration import CalibrationDataset, CoverageGrid, miscalibration_area
from services.dgpa import DgpaModel, create_model, load_model, predict_windows, save_model
from services.metrics import (
    MetricReport,
    calibration_bands,
    calibration_curves,
    mae,
    rec_curve,
    shared_epsilon_max,
    summarize,
)
from services.stream_data import (
    Standardizer,
    generate_synthetic_stream,
    load_shots_csv,
    preprocess,
    split,
    windowize_many,
    write_shots_csv,
)
from services.training import pretrain
from worker.tasks import plan_jobs, run_trial_jobs

logger = logging.getLogger(__name__)

# keeps the base-model seed out of the range used by trial indices
PRETRAIN_SEED_KEY = 0x7FFFFFFF
VERSIONED_PACKAGES = ("numpy", "scipy", "pandas", "joblib", "pydantic", "tenacity")


@dataclass
class PreparedData:
    train: List[ShotRecord]
    val: List[ShotRecord]
    test: List[ShotRecord]
    stream: List[ShotRecord]
    report: PreprocessReport
    standardizer: Optional[Standardizer] = None

    @property
    def n_channels(self) -> int:
        return self.train[0].n_channels


@dataclass
class RunOutcome:
    output_dir: Path
    summary: List[dict] = field(default_factory=list)
    failures: List[dict] = field(default_factory=list)


def load_raw_shots(config: ExperimentConfig) -> List[ShotRecord]:
    if config.data.csv_path is not None:
        return load_shots_csv(config.data.csv_path)
    return generate_synthetic_stream(config.data.synthetic)


def prepare_data(config: ExperimentConfig) -> PreparedData:
    """Clean, split the pretraining range, and standardize inputs on the training split."""
    shots, report = preprocess(load_raw_shots(config), config.preprocess.stuck_threshold)
    n_pretrain = config.split.pretrain_shots
    pretrain_range, stream = shots[:n_pretrain], shots[n_pretrain:]
    if not pretrain_range:
        raise ConfigurationError("pretraining range is empty after preprocessing")
    try:
        train, val, test = split(pretrain_range, config.split.ratios, config.split.seed)
    except ArgumentError as e:
        raise ConfigurationError(f"cannot split the pretraining range: {e}") from e
    if not train:
        raise ConfigurationError("training split is empty")

    standardizer = None
    if config.preprocess.standardize:
        standardizer = Standardizer.fit(train)
        train, val, test, stream = (standardizer.apply_all(part) for part in (train, val, test, stream))
    logger.info(
        f"📂 [Experiment] {len(train)}/{len(val)}/{len(test)} train/val/test shots, "
        f"{len(stream)} stream shots"
    )
    return PreparedData(train=train, val=val, test=test, stream=stream, report=report, standardizer=standardizer)


def _check_input_shape(model: DgpaModel, config: ExperimentConfig, n_channels: int) -> None:
    expected = (config.window.length, n_channels)
    if tuple(model.input_shape) != expected:
        raise ConfigurationError(f"base model expects windows {tuple(model.input_shape)}, data gives {expected}")


# =============================================================================
# gen
# =============================================================================

def cmd_gen(config: ExperimentConfig, path: Optional[Path] = None) -> Path:
    """Write the configured synthetic stream in the load_shots_csv schema."""
    if config.data.synthetic is None:
        raise ConfigurationError("gen needs a [data.synthetic] section")
    path = Path(path) if path is not None else config.output_dir / "stream.csv"
    shots = generate_synthetic_stream(config.data.synthetic)
    write_shots_csv(path, shots, n_channels=config.data.synthetic.n_channels)
    logger.info(f"💾 [Experiment] Wrote {len(shots)} shots to {path}")
    return path


# =============================================================================
# pretrain
# =============================================================================

def cmd_pretrain(config: ExperimentConfig) -> Path:
    """Train the base model, evaluate it per split, and checkpoint it."""
    data = prepare_data(config)
    window, network, dgpa = config.window, config.network, config.dgpa
    model = create_model(
        network.layer_specs(),
        (window.length, data.n_channels),
        n_features=dgpa.n_features,
        length_scale=dgpa.length_scale,
        ridge=dgpa.ridge,
        noise_floor=dgpa.noise_floor,
        seed=derive_seed(config.run.master_seed, PRETRAIN_SEED_KEY),
    )
    splits = {
        name: windowize_many(shots, window.length, window.train_stride)
        for name, shots in (("train", data.train), ("validation", data.val), ("test", data.test))
    }
    if len(splits["train"]) == 0:
        raise ConfigurationError(f"training shots yield no {window.length}-step windows")

    grid = CoverageGrid.uniform(config.calibration.n_levels)
    logger.info(f"🏋️ [Experiment] Pretraining on {len(splits['train'])} windows")
    result = pretrain(model, splits["train"], splits["validation"], network, grid, config.calibration.min_windows)
    checkpoint = save_model(model, config.base_checkpoint)

    out = config.output_dir / "pretrain"
    write_frame(
        pd.DataFrame(
            [(r.epoch, r.train_loss, r.val_mae) for r in result.history],
            columns=["epoch", "train_loss", "val_mae"],
        ),
        out / "training_log.csv",
    )

    errors, split_summary = {}, {}
    for name, windows in splits.items():
        if len(windows) == 0:
            continue
        means, sigmas = predict_windows(model, windows)
        errors[name] = np.abs(means - windows.targets)
        entry = {"windows": len(windows), "mae": mae(means, windows.targets)}
        try:
            entry["miscalibration_area"] = miscalibration_area(CalibrationDataset(means, sigmas, windows.targets)).area
        except ArgumentError:
            entry["miscalibration_area"] = float("nan")
        split_summary[name] = entry

    epsilon_max = shared_epsilon_max({"all": np.concatenate(list(errors.values()))})
    curves = {name: rec_curve(err, epsilon_max) for name, err in errors.items()}
    for name, curve in curves.items():
        split_summary[name]["aoc"] = curve.aoc
    write_rec(curves, out / "rec.csv")
    write_json({
        "splits": split_summary,
        "epsilon_max": epsilon_max,
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "stopped_early": result.stopped_early,
        "alpha": model.alpha,
        "checkpoint": checkpoint,
    }, out / "summary.json")
    logger.info(f"✅ [Experiment] Base model saved to {checkpoint} (alpha {model.alpha:.4g})")
    return checkpoint


# =============================================================================
# run / report
# =============================================================================

def config_hash(config: ExperimentConfig) -> str:
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def _pooled(runs: Sequence[MetricReport], attribute: str) -> np.ndarray:
    return np.concatenate([getattr(r, attribute) for r in runs]) if runs else np.zeros(0)


def _strategy_rank(name: str) -> tuple:
    return (ALL_STRATEGIES.index(name), name) if name in ALL_STRATEGIES else (len(ALL_STRATEGIES), name)


def emit_summary(reports: Dict[str, List[MetricReport]], output_dir: Path) -> List[dict]:
    """
    Summary table, stream REC, pooled and per-checkpoint calibration curves
    with their across-trial bands, and the per-shot MAE series.
    """
    output_dir = Path(output_dir)
    # canonical strategy order; `run` and `report` must write identical tables
    reports = dict(sorted(reports.items(), key=lambda item: _strategy_rank(item[0])))
    epsilon_max = shared_epsilon_max({name: _pooled(runs, "abs_errors") for name, runs in reports.items()})
    rows = summarize(reports, epsilon_max)
    write_summary(rows, output_dir)

    rec, calibration = {}, {}
    for name, runs in reports.items():
        errors = _pooled(runs, "abs_errors")
        if errors.size:
            rec[name] = rec_curve(errors, epsilon_max)
        try:
            data = CalibrationDataset(_pooled(runs, "y_pred"), _pooled(runs, "sigma"), _pooled(runs, "y_true"))
            calibration[name] = miscalibration_area(data)
        except ArgumentError:
            logger.warning(f"⚠️ [Experiment] Too few predictions for a '{name}' calibration curve")
    write_rec(rec, output_dir / "rec.csv")
    write_calibration(calibration, output_dir / "calibration.csv")
    curves = calibration_curves(reports)
    write_frame(curves, output_dir / "calibration_curves.csv")
    write_frame(calibration_bands(curves), output_dir / "calibration_bands.csv")
    write_frame(mae_per_shot(reports), output_dir / "mae_per_shot.csv")

    shots = [
        pd.read_csv(output_dir / name / f"trial_{r.trial}" / "shots.csv", float_precision="round_trip")
        for name, runs in reports.items() for r in runs
    ]
    if shots:
        write_frame(pd.concat(shots, ignore_index=True), output_dir / "shots.csv")
    return rows


def cmd_run(config: ExperimentConfig) -> RunOutcome:
    """Stream every (strategy, trial) from the same base checkpoint and shot sequence."""
    checkpoint = config.base_checkpoint
    if not checkpoint.exists():
        raise UsageError(f"base checkpoint {checkpoint} not found; run `pretrain` first")
    data = prepare_data(config)
    base = load_model(checkpoint)
    _check_input_shape(base, config, data.n_channels)

    strategies = list(config.ensemble.strategies)
    jobs = plan_jobs(strategies, config.run.seeds)
    results = run_trial_jobs(jobs, base, data.stream, config, config.output_dir)

    reports: Dict[str, List[MetricReport]] = {}
    failures = []
    for result in results:
        if result.ok:
            reports.setdefault(result.job.strategy, []).append(result.report)
        else:
            failures.append({
                "strategy": result.job.strategy,
                "trial": result.job.trial,
                "seed": result.job.seed,
                "error": result.error_message,
            })
    rows = emit_summary(reports, config.output_dir)

    write_json({
        "config": config.model_dump(mode="json"),
        "config_hash": config_hash(config),
        "base_checkpoint": str(checkpoint),
        "base_checkpoint_sha256": file_hash(checkpoint),
        "strategies": strategies,
        "seeds": config.run.seeds,
        "stream_shots": [shot.shot_id for shot in data.stream],
        "preprocess": {
            "kept": data.report.kept,
            "dropped_nan": data.report.dropped_nan,
            "dropped_stuck": data.report.dropped_stuck,
        },
        "failures": failures,
        "versions": package_versions(),
    }, config.output_dir / "manifest.json")

    if failures:
        logger.warning(f"⚠️ [Experiment] {len(failures)} trial(s) failed; see manifest.json")
    logger.info(f"✅ [Experiment] Results written to {config.output_dir}")
    return RunOutcome(output_dir=config.output_dir, summary=rows, failures=failures)


def cmd_report(output_dir: Path, strategies: Optional[Sequence[str]] = None) -> List[dict]:
    """Rebuild every summary table from the trial files of a results directory."""
    reports = read_results(output_dir, strategies)
    if not reports:
        raise UsageError(f"no trial results found under {output_dir}")
    return emit_summary(reports, output_dir)
