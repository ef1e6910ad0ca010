"""
Trial Jobs

Every (strategy, trial) stream run is an independent job. Jobs are fanned
out with joblib across `settings.N_JOBS` worker processes; each one writes
only to its own <strategy>/trial_<k>/ directory, and the caller joins the
results serially.

A failing job is recorded and returned instead of raised, so one broken
strategy does not take the others down with it.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

from joblib import Parallel, delayed

from core.config import ExperimentConfig, settings
from core.errors import StreamUQError
from core.tracing import get_trial_logger, init_sentry
from models import ShotRecord
from services.artifacts import trial_dir, write_trial
from services.dgpa import DgpaModel
from services.ensemble import run_trial
from services.metrics import MetricReport

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrialJob:
    strategy: str
    trial: int
    seed: int


@dataclass
class TrialResult:
    job: TrialJob
    status: str = "pending"
    report: Optional[MetricReport] = None
    error_message: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status == "completed"


def plan_jobs(strategies: Sequence[str], seeds: Sequence[int]) -> List[TrialJob]:
    return [
        TrialJob(strategy=strategy, trial=trial, seed=int(seed))
        for strategy in strategies
        for trial, seed in enumerate(seeds)
    ]


def run_trial_job(
    job: TrialJob,
    base_model: DgpaModel,
    shots: Sequence[ShotRecord],
    config: ExperimentConfig,
    output_dir: Path,
) -> TrialResult:
    """Run one trial and persist its files; exceptions become a failed result."""
    # fresh worker processes start without the parent's Sentry client
    init_sentry(settings.SENTRY_DSN, settings.ENVIRONMENT)
    log = get_trial_logger(job.strategy, job.trial, logger)
    result = TrialResult(job=job, status="processing")
    checkpoint_root = Path(output_dir) / "checkpoints" if config.run.checkpoint_interval else None
    try:
        checkpoint_dir = trial_dir(checkpoint_root, job.strategy, job.trial) if checkpoint_root else None
        report = run_trial(base_model, job.strategy, shots, job.trial, job.seed, config, checkpoint_dir)
        write_trial(report, trial_dir(output_dir, job.strategy, job.trial))
        result.report = report
        result.status = "completed"
    except StreamUQError as e:
        log.error(f"❌ Trial failed: {e}")
        result.status = "failed"
        result.error_message = f"{type(e).__name__}: {e}"
    except Exception as e:
        log.exception(f"❌ Trial crashed: {e}")
        result.status = "failed"
        result.error_message = f"{type(e).__name__}: {e}"
    return result


def run_trial_jobs(
    jobs: Sequence[TrialJob],
    base_model: DgpaModel,
    shots: Sequence[ShotRecord],
    config: ExperimentConfig,
    output_dir: Path,
    n_jobs: Optional[int] = None,
) -> List[TrialResult]:
    """Run all jobs; results come back in job order whatever the parallelism."""
    n_jobs = settings.N_JOBS if n_jobs is None else n_jobs
    logger.info(f"🚀 [Worker] Dispatching {len(jobs)} trial job(s) on {n_jobs} worker(s)")
    results = Parallel(n_jobs=n_jobs)(
        delayed(run_trial_job)(job, base_model, shots, config, output_dir) for job in jobs
    )
    failed = [r for r in results if not r.ok]
    if failed:
        logger.warning(f"⚠️ [Worker] {len(failed)} of {len(jobs)} trial job(s) failed")
    else:
        logger.info(f"✅ [Worker] All {len(jobs)} trial job(s) completed")
    return list(results)
