"""
Trial Tracing

Correlates log lines of one (strategy, trial) job and measures the wall time
of online updates.
"""

import logging
import time
from contextlib import contextmanager
from typing import Iterator, List, Optional

logger = logging.getLogger(__name__)


class TrialContextLogger:
    """
    Context-aware logger that prefixes every message with its job.

    Usage:
        log = get_trial_logger("uq_ensemble", trial=3)
        log.info("Processing shot 120")  # -> "[uq_ensemble/3] Processing shot 120"
    """

    def __init__(self, strategy: str, trial: int, logger: logging.Logger):
        self.strategy = strategy
        self.trial = trial
        self.logger = logger

    def _format(self, message: str) -> str:
        return f"[{self.strategy}/{self.trial}] {message}"

    def debug(self, message: str):
        self.logger.debug(self._format(message))

    def info(self, message: str):
        self.logger.info(self._format(message))

    def warning(self, message: str):
        self.logger.warning(self._format(message))

    def error(self, message: str):
        self.logger.error(self._format(message))

    def exception(self, message: str):
        self.logger.exception(self._format(message))


def get_trial_logger(strategy: str, trial: int, base: Optional[logging.Logger] = None) -> TrialContextLogger:
    return TrialContextLogger(strategy, trial, base or logger)


@contextmanager
def timed_block(sink: List[float]) -> Iterator[None]:
    """Append the elapsed wall time of the block, in milliseconds, to `sink`."""
    start = time.perf_counter()
    try:
        yield
    finally:
        sink.append((time.perf_counter() - start) * 1000)


_sentry_ready = False


def init_sentry(dsn: Optional[str], environment: str = "development") -> bool:
    """
    Send ERROR logs to Sentry when a DSN is configured; INFO and above
    become breadcrumbs. Safe to call more than once per process.
    """
    global _sentry_ready
    if not dsn:
        return False
    if _sentry_ready:
        return True
    try:
        import sentry_sdk
        from sentry_sdk.integrations.logging import LoggingIntegration

        logging_integration = LoggingIntegration(
            level=logging.INFO,
            event_level=logging.ERROR,
        )
        sentry_sdk.init(
            dsn=dsn,
            environment=environment,
            integrations=[logging_integration],
        )
        logger.info("🔭 Sentry initialized with logging and error tracking")
        _sentry_ready = True
        return True
    except ImportError:
        logger.warning("⚠️ sentry-sdk not installed, error tracking disabled")
    except Exception as e:
        logger.warning(f"⚠️ Sentry initialization failed: {e}")
    return False
