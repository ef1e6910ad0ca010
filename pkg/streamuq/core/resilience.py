"""
Error Resilience Module with Tenacity

Retry decorators for recoverable numeric failures in the GP head and for
transient file-system errors on artifact writes, plus a circuit breaker that
isolates failing ensemble members.
"""

import logging
from functools import wraps
from typing import Any, Callable, Optional, TypeVar

from tenacity import (
    RetryCallState,
    before_sleep_log,
    retry,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
    wait_none,
)

from core.errors import NotPositiveDefiniteError

logger = logging.getLogger(__name__)

T = TypeVar("T")


# =============================================================================
# Exception Types for Retry
# =============================================================================

# Transient errors on artifact writes (network file systems, busy files)
TRANSIENT_IO_EXCEPTIONS = (
    BlockingIOError,
    InterruptedError,
    TimeoutError,
)


# =============================================================================
# Retry Decorators
# =============================================================================

def with_numeric_retry(
    max_attempts: int = 3,
    regularize: Optional[Callable[[Any], None]] = None,
):
    """
    Retry a GP-head method when the precision matrix is not positive definite.

    Before each retry `regularize(owner)` is called with the first positional
    argument of the decorated call (the head), so the matrix is shifted by
    its ridge before the factorization is attempted again.

    Usage:
        @with_numeric_retry(regularize=lambda head: head.regularize())
        def _factor(self):
            ...
    """
    def _before_sleep(retry_state: RetryCallState) -> None:
        owner = retry_state.args[0] if retry_state.args else None
        logger.warning(
            f"🔁 [Resilience] {retry_state.fn.__name__} failed "
            f"(attempt {retry_state.attempt_number}/{max_attempts}): "
            f"{retry_state.outcome.exception()}; re-regularizing"
        )
        if regularize is not None and owner is not None:
            regularize(owner)

    def decorator(func: Callable[..., T]) -> Callable[..., T]:
        @wraps(func)
        @retry(
            stop=stop_after_attempt(max_attempts),
            wait=wait_none(),
            retry=retry_if_exception_type(NotPositiveDefiniteError),
            before_sleep=_before_sleep,
            reraise=True,
        )
        def wrapper(*args: Any, **kwargs: Any) -> T:
            return func(*args, **kwargs)

        return wrapper
    return decorator


def with_retry_sync(
    max_attempts: int = 3,
    min_wait: float = 0.1,
    max_wait: float = 2,
    exceptions: tuple = TRANSIENT_IO_EXCEPTIONS,
):
    """
    Retry with exponential backoff for file writes.

    Usage:
        @with_retry_sync(max_attempts=3)
        def write_summary(path, rows):
            ...
    """
    def decorator(func: Callable[..., T]) -> Callable[..., T]:
        @wraps(func)
        @retry(
            stop=stop_after_attempt(max_attempts),
            wait=wait_exponential(multiplier=min_wait, min=min_wait, max=max_wait),
            retry=retry_if_exception_type(exceptions),
            before_sleep=before_sleep_log(logger, logging.WARNING),
            reraise=True,
        )
        def wrapper(*args: Any, **kwargs: Any) -> T:
            return func(*args, **kwargs)

        return wrapper
    return decorator


# =============================================================================
# Circuit Breaker for Ensemble Members
# =============================================================================

class MemberBreaker:
    """
    Circuit breaker guarding one ensemble member's update.

    States:
    - CLOSED: member takes part in fusion
    - OPEN: the last update failed; member is left out of the next fusion

    The breaker has no timeout. The member keeps being updated while open,
    and a successful update closes it again.

    Usage:
        breaker = MemberBreaker(name="uq_ensemble/member_2")
        try:
            with breaker:
                fine_tune(member)
        except StreamUQError:
            member.model.restore(snapshot)
    """

    def __init__(self, name: str = "member", failure_threshold: int = 1):
        self.name = name
        self.failure_threshold = failure_threshold
        self.failures = 0
        self.total_failures = 0
        self.state = "closed"

    @property
    def is_open(self) -> bool:
        return self.state == "open"

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_type is None:
            if self.state == "open":
                logger.info(f"⚡ [Breaker] '{self.name}' recovered, closing")
            self.state = "closed"
            self.failures = 0
        else:
            self.failures += 1
            self.total_failures += 1
            if self.failures >= self.failure_threshold:
                self.state = "open"
                logger.error(f"⚡ [Breaker] '{self.name}' OPENED after {self.failures} failure(s): {exc_val}")

        return False  # Don't suppress the exception
