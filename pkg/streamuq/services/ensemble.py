"""
Online Ensemble

The online loop: every incoming shot is first predicted by each member
(prequential evaluation), the member predictions are fused, and only then is
the shot added to the members' rolling buffers and the members fine-tuned,
refit and recalibrated.

Strategies:
- static: the pretrained model, never updated
- single_online: one model fine-tuned on a 5-shot buffer
- naive_ensemble: members on the buffer schedule, averaged
- uq_ensemble: members on the buffer schedule, inverse-variance weighted

Usage:
    from services.ensemble import create_ensemble, step

    state = create_ensemble(base_model, "uq_ensemble", trial_seed, config)
    for shot in shots:
        outcome = step(state, shot)
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import LinAlgError

from core.config import ExperimentConfig, settings
from core.errors import ArgumentError, NumericError, SequencingError, StreamUQError
from core.resilience import MemberBreaker
from core.seeding import member_seed
from core.tracing import TrialContextLogger, get_trial_logger, timed_block
from models import ShotRecord, StepOutcome, WindowSet
from services.calibration import MIN_CALIBRATION_SAMPLES, CalibrationDataset, CoverageGrid, fit_alpha
from services.dgpa import DgpaModel, clone_model, predict, predict_features, save_model, window_features
from services.diffnet import AdamState
from services.metrics import CheckpointCurves, MetricReport, shot_metrics
from services.stream_data import windowize
from services.training import fine_tune

logger = logging.getLogger(__name__)


class Strategy(str, Enum):
    STATIC = "static"
    SINGLE_ONLINE = "single_online"
    NAIVE_ENSEMBLE = "naive_ensemble"
    UQ_ENSEMBLE = "uq_ensemble"

    @property
    def online(self) -> bool:
        return self is not Strategy.STATIC


# =============================================================================
# Fusion Rules
# =============================================================================

def _check_members(means, sigmas) -> Tuple[np.ndarray, np.ndarray]:
    means = np.asarray(means, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if means.shape[0] == 0:
        raise ArgumentError("fusion needs at least one member prediction")
    if means.shape != sigmas.shape:
        raise ArgumentError(f"means {means.shape} and sigmas {sigmas.shape} differ in shape")
    if not (np.all(np.isfinite(means)) and np.all(np.isfinite(sigmas))):
        raise NumericError("non-finite member prediction")
    if np.any(sigmas <= 0):
        raise ArgumentError("member sigmas must be positive")
    return means, sigmas


def inverse_variance_weights(sigmas) -> np.ndarray:
    """w_i = sigma_i^-2 / sum_j sigma_j^-2 along the member axis (axis 0)."""
    precision = 1.0 / np.square(np.asarray(sigmas, dtype=np.float64))
    return precision / precision.sum(axis=0)


def fuse_uq(means, sigmas) -> Tuple[np.ndarray, np.ndarray]:
    """
    Inverse-variance weighted mean and combined sigma (sum sigma_i^-2)^-1/2.

    Member predictions run along axis 0; any trailing axes (windows) are
    fused independently.
    """
    means, sigmas = _check_members(means, sigmas)
    if means.shape[0] == 1:
        return means[0].copy(), sigmas[0].copy()
    precision = 1.0 / np.square(sigmas)
    total = precision.sum(axis=0)
    return (precision / total * means).sum(axis=0), 1.0 / np.sqrt(total)


def fuse_naive(means, sigmas) -> Tuple[np.ndarray, np.ndarray]:
    """Unweighted mean; sigma is the root mean square of member sigmas."""
    means, sigmas = _check_members(means, sigmas)
    if means.shape[0] == 1:
        return means[0].copy(), sigmas[0].copy()
    return means.mean(axis=0), np.sqrt(np.mean(np.square(sigmas), axis=0))


# =============================================================================
# Rolling Buffer
# =============================================================================

@dataclass
class HeldOut:
    """A member's prequential prediction of a shot, with sigma before alpha scaling."""
    means: np.ndarray
    raw_sigmas: np.ndarray
    targets: np.ndarray


class RollingBuffer:
    """FIFO of the most recent shots; windows are built from strided views on demand."""

    def __init__(self, capacity: int, window_length: int = 100, stride: int = 1):
        if capacity < 1:
            raise ArgumentError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.window_length = window_length
        self.stride = stride
        self.shots: Deque[ShotRecord] = deque(maxlen=capacity)
        self.held_out: Dict[int, HeldOut] = {}

    def __len__(self) -> int:
        return len(self.shots)

    @property
    def shot_ids(self) -> List[int]:
        return [shot.shot_id for shot in self.shots]

    def append(self, shot: ShotRecord, held_out: Optional[HeldOut] = None) -> None:
        self.shots.append(shot)
        if held_out is not None:
            self.held_out[shot.shot_id] = held_out
        live = set(self.shot_ids)
        self.held_out = {k: v for k, v in self.held_out.items() if k in live}

    def windows(self, shots: Optional[Sequence[ShotRecord]] = None) -> WindowSet:
        shots = self.shots if shots is None else shots
        return WindowSet([windowize(shot, self.window_length, self.stride) for shot in shots])


# =============================================================================
# Ensemble State
# =============================================================================

@dataclass
class Member:
    index: int
    model: DgpaModel
    buffer: RollingBuffer
    breaker: MemberBreaker


@dataclass
class EnsembleState:
    strategy: Strategy
    members: List[Member]
    config: ExperimentConfig
    cursor: int = -1
    log: Optional[TrialContextLogger] = None
    grid: CoverageGrid = field(default_factory=CoverageGrid)

    @property
    def window_length(self) -> int:
        return self.config.window.length


def buffer_capacities(strategy: Strategy, config: ExperimentConfig) -> List[int]:
    if strategy is Strategy.STATIC:
        return [1]
    if strategy is Strategy.SINGLE_ONLINE:
        return [config.ensemble.single_online_buffer]
    return list(config.ensemble.buffer_schedule)


def create_ensemble(
    base_model: DgpaModel,
    strategy,
    trial_seed: int,
    config: ExperimentConfig,
    trial: int = 0,
) -> EnsembleState:
    """Clone the base model once per buffer capacity; member i is reseeded from (trial_seed, i)."""
    strategy = Strategy(strategy)
    network = config.network
    members = []
    for i, capacity in enumerate(buffer_capacities(strategy, config)):
        model = clone_model(base_model)
        model.reseed(member_seed(trial_seed, i))
        model.optimizer = AdamState(
            learning_rate=network.learning_rate,
            beta1=network.beta1,
            beta2=network.beta2,
            epsilon=network.epsilon,
        )
        members.append(Member(
            index=i,
            model=model,
            buffer=RollingBuffer(capacity, config.window.length, config.window.stride),
            breaker=MemberBreaker(name=f"{strategy.value}/{trial}/member_{i}"),
        ))
    return EnsembleState(
        strategy=strategy,
        members=members,
        config=config,
        log=get_trial_logger(strategy.value, trial, logger),
        grid=CoverageGrid.uniform(config.calibration.n_levels),
    )


# =============================================================================
# Online Step
# =============================================================================

def _calibration_set(member: Member, newest: ShotRecord, windows: WindowSet, phi: np.ndarray) -> Optional[CalibrationDataset]:
    """
    Older buffer shots predicted with the member's current weights, plus the
    newest shot through its held-out (pre-update) prediction.

    `phi` holds the refreshed features of `windows`, the whole buffer.
    """
    model = member.model
    older = windows.shot_ids != newest.shot_id
    means, sigmas, targets = [], [], []
    if older.any():
        mean, sigma = predict_features(model, phi[older])
        means.append(mean)
        sigmas.append(sigma / model.alpha)
        targets.append(windows.targets[older])
    held = member.buffer.held_out.get(newest.shot_id)
    if held is not None:
        means.append(held.means)
        sigmas.append(held.raw_sigmas)
        targets.append(held.targets)
    if not means:
        return None
    if sum(len(t) for t in targets) < MIN_CALIBRATION_SAMPLES:
        return None
    return CalibrationDataset(np.concatenate(means), np.concatenate(sigmas), np.concatenate(targets))


def _update_member(state: EnsembleState, member: Member, shot: ShotRecord) -> Optional[str]:
    """Fine-tune, refit and recalibrate one member; rolls it back if any stage fails."""
    snapshot = member.model.snapshot()
    try:
        with member.breaker:
            windows = member.buffer.windows()
            if len(windows) == 0:
                return None
            fine_tune(member.model, windows, state.config.network, state.config.ensemble.finetune_max_windows)
            phi = window_features(member.model, windows)
            member.model.head.fit(phi, windows.targets)
            data = _calibration_set(member, shot, windows, phi)
            if data is not None and len(data) >= state.config.calibration.min_windows:
                fit = fit_alpha(data, state.grid)
                if not fit.degenerate:
                    member.model.alpha = fit.alpha
    except (StreamUQError, LinAlgError, ValueError) as e:
        member.model.restore(snapshot)
        return f"{type(e).__name__}: {e}"
    return None


def step(state: EnsembleState, shot: ShotRecord) -> StepOutcome:
    """
    Process one shot: predict with every active member before any update,
    fuse, then (online strategies) buffer the shot and update every member.
    """
    if shot.shot_id <= state.cursor:
        raise SequencingError(f"shot {shot.shot_id} arrived after shot {state.cursor}")

    windows = windowize(shot, state.window_length, state.config.window.stride)
    n_members = len(state.members)
    n_windows = len(windows)
    member_means = np.full((n_members, n_windows), np.nan)
    member_sigmas = np.full((n_members, n_windows), np.nan)
    included = np.zeros(n_members, dtype=bool)
    held_out: Dict[int, HeldOut] = {}
    failed: List[int] = []

    # (1) prequential predictions; members whose last update failed sit this one out
    active = [member for member in state.members if not member.breaker.is_open] or state.members
    if n_windows:
        for member in active:
            try:
                mean, sigma = predict(member.model, windows.inputs)
            except NumericError as e:
                state.log.warning(f"member {member.index} failed to predict shot {shot.shot_id}: {e}")
                failed.append(member.index)
                continue
            member_means[member.index] = mean
            member_sigmas[member.index] = sigma
            included[member.index] = True
            held_out[member.index] = HeldOut(mean, sigma / member.model.alpha, windows.targets)

        if not included.any():
            raise NumericError(f"no ensemble member could predict shot {shot.shot_id}")

    # (2) fusion over the members that predicted
    weights = np.zeros((n_members, n_windows))
    if n_windows:
        means, sigmas = member_means[included], member_sigmas[included]
        if state.strategy is Strategy.UQ_ENSEMBLE:
            fused_mean, fused_sigma = fuse_uq(means, sigmas)
            weights[included] = inverse_variance_weights(sigmas)
        else:
            fused_mean, fused_sigma = fuse_naive(means, sigmas)
            weights[included] = 1.0 / included.sum()
    else:
        state.log.warning(f"shot {shot.shot_id} yields no windows; nothing to predict")
        fused_mean = fused_sigma = np.zeros(0)

    timings: List[float] = []
    if state.strategy.online:
        with timed_block(timings):
            # (3) buffer, (4) fine-tune, (5) head refit, (6) recalibrate
            for member in state.members:
                member.buffer.append(shot, held_out.get(member.index))
            n_jobs = min(settings.MEMBER_N_JOBS, n_members)
            errors = Parallel(n_jobs=n_jobs, prefer="threads")(
                delayed(_update_member)(state, member, shot) for member in state.members
            )
        for member, error in zip(state.members, errors):
            if error is not None:
                state.log.error(f"member {member.index} update failed on shot {shot.shot_id}: {error}")
                failed.append(member.index)

    # (7) advance
    state.cursor = shot.shot_id
    return StepOutcome(
        shot_id=shot.shot_id,
        member_means=member_means,
        member_sigmas=member_sigmas,
        member_weights=weights,
        included=included,
        mean=fused_mean,
        sigma=fused_sigma,
        targets=windows.targets,
        end_indices=windows.end_indices,
        wall_ms=timings[0] if timings and state.config.run.record_timings else 0.0,
        failed_members=sorted(set(failed)),
    )


# =============================================================================
# Stream Runs
# =============================================================================

def checkpoint_members(state: EnsembleState, directory: Path, shot_id: int) -> None:
    for member in state.members:
        save_model(member.model, Path(directory) / f"member_{member.index}_shot_{shot_id}.npz")


def run_trial(
    base_model: DgpaModel,
    strategy,
    shots: Sequence[ShotRecord],
    trial: int,
    trial_seed: int,
    config: ExperimentConfig,
    checkpoint_dir: Optional[Path] = None,
) -> MetricReport:
    """One prequential pass over `shots` for one strategy and trial seed."""
    state = create_ensemble(base_model, strategy, trial_seed, config, trial)
    state.log.info(f"▶️ Streaming {len(shots)} shots with {len(state.members)} member(s), seed {trial_seed}")

    rows: List[dict] = []
    weight_rows, failures = [], []
    curves = CheckpointCurves(len(state.members), state.grid)
    window_parts: List[Tuple[np.ndarray, ...]] = []
    interval = config.run.checkpoint_interval
    for count, shot in enumerate(shots, start=1):
        outcome = step(state, shot)
        if outcome.failed_members:
            failures.append([outcome.shot_id, *outcome.failed_members])
        curves.add(outcome)
        if interval and count % interval == 0:
            curves.checkpoint(outcome.shot_id)
            if checkpoint_dir is not None:
                checkpoint_members(state, checkpoint_dir, outcome.shot_id)
        if outcome.targets.size == 0:
            continue
        rows.append({
            "shot_id": outcome.shot_id,
            "n_windows": outcome.targets.size,
            "wall_ms": outcome.wall_ms,
            **shot_metrics(outcome.mean, outcome.targets, outcome.sigma),
        })
        weight_rows.append(outcome.member_weights.mean(axis=1))
        window_parts.append((
            np.full(outcome.targets.size, outcome.shot_id, dtype=np.int64),
            outcome.end_indices,
            outcome.targets,
            outcome.mean,
            outcome.sigma,
        ))

    # the tail after the last full interval (or the whole stream without one) closes here
    if curves.pending:
        curves.checkpoint(shots[-1].shot_id)

    report = MetricReport(strategy=state.strategy.value, trial=trial, seed=trial_seed, failed_members=failures)
    report.checkpoint_curves = curves.table()
    if rows:
        column = lambda key, dtype=np.float64: np.array([row[key] for row in rows], dtype=dtype)
        report.shot_ids = column("shot_id", np.int64)
        report.n_windows = column("n_windows", np.int64)
        report.mae, report.mse, report.mape = column("mae"), column("mse"), column("mape")
        report.mean_sigma = column("mean_sigma")
        report.wall_ms = column("wall_ms")
        report.member_weights = np.vstack(weight_rows)
        parts = [np.concatenate(part) for part in zip(*window_parts)]
        report.window_shot_ids, report.window_end_indices, report.y_true, report.y_pred, report.sigma = parts
        state.log.info(f"✅ Aggregate MAE {report.aggregate_mae:.5f} over {report.n_shots} shots")
    return report


def run_stream(
    base_model: DgpaModel,
    strategy,
    shots: Sequence[ShotRecord],
    trial_seeds: Sequence[int],
    config: ExperimentConfig,
    checkpoint_root: Optional[Path] = None,
) -> List[MetricReport]:
    """One MetricReport per trial seed; trials are independent and deterministic."""
    reports = []
    for trial, seed in enumerate(trial_seeds):
        checkpoint_dir = None
        if checkpoint_root is not None:
            checkpoint_dir = Path(checkpoint_root) / Strategy(strategy).value / f"trial_{trial}"
        reports.append(run_trial(base_model, strategy, shots, trial, seed, config, checkpoint_dir))
    return reports
