"""
Unit Tests for Error Resilience Module

Tests retry decorators and the member circuit breaker.
"""

import pytest

from core.errors import NotPositiveDefiniteError, NumericError
from core.resilience import MemberBreaker, with_numeric_retry, with_retry_sync


class TestSyncRetryDecorator:
    """Test the synchronous retry decorator."""

    def test_success_on_first_try(self):
        call_count = 0

        @with_retry_sync(max_attempts=3)
        def successful_func():
            nonlocal call_count
            call_count += 1
            return "success"

        assert successful_func() == "success"
        assert call_count == 1

    def test_retry_on_transient_error(self):
        call_count = 0

        @with_retry_sync(max_attempts=3, min_wait=0.01, max_wait=0.02)
        def flaky_func():
            nonlocal call_count
            call_count += 1
            if call_count < 3:
                raise BlockingIOError("resource busy")
            return "success"

        assert flaky_func() == "success"
        assert call_count == 3

    def test_gives_up_after_max_attempts(self):
        call_count = 0

        @with_retry_sync(max_attempts=2, min_wait=0.01, max_wait=0.02)
        def always_busy():
            nonlocal call_count
            call_count += 1
            raise TimeoutError("still busy")

        with pytest.raises(TimeoutError):
            always_busy()
        assert call_count == 2

    def test_no_retry_on_other_errors(self):
        call_count = 0

        @with_retry_sync(max_attempts=3)
        def broken():
            nonlocal call_count
            call_count += 1
            raise PermissionError("read-only results directory")

        with pytest.raises(PermissionError):
            broken()
        assert call_count == 1


class TestNumericRetry:
    """Test re-regularizing retries for factorization failures."""

    class Head:
        def __init__(self, failures):
            self.failures = failures
            self.calls = 0
            self.regularized = 0

        @with_numeric_retry(max_attempts=3, regularize=lambda head: head.regularize())
        def factor(self):
            self.calls += 1
            if self.calls <= self.failures:
                raise NotPositiveDefiniteError("not positive definite")
            return "factor"

        def regularize(self):
            self.regularized += 1

    def test_recovers_after_regularizing(self):
        head = self.Head(failures=2)
        assert head.factor() == "factor"
        assert head.calls == 3
        assert head.regularized == 2

    def test_reraises_after_max_attempts(self):
        head = self.Head(failures=5)
        with pytest.raises(NotPositiveDefiniteError):
            head.factor()
        assert head.calls == 3

    def test_other_numeric_errors_are_not_retried(self):
        calls = []

        @with_numeric_retry(max_attempts=3)
        def diverged():
            calls.append(1)
            raise NumericError("non-finite loss")

        with pytest.raises(NumericError):
            diverged()
        assert len(calls) == 1


class TestMemberBreaker:
    """Test the member circuit breaker."""

    def test_starts_closed(self):
        breaker = MemberBreaker(name="test")
        assert breaker.state == "closed"
        assert not breaker.is_open

    def test_opens_on_failure(self):
        breaker = MemberBreaker(name="test")
        with pytest.raises(NumericError):
            with breaker:
                raise NumericError("boom")
        assert breaker.is_open
        assert breaker.failures == 1

    def test_threshold(self):
        breaker = MemberBreaker(name="test", failure_threshold=2)
        for _ in range(2):
            assert not breaker.is_open
            with pytest.raises(NumericError):
                with breaker:
                    raise NumericError("boom")
        assert breaker.is_open

    def test_success_closes(self):
        breaker = MemberBreaker(name="test")
        with pytest.raises(NumericError):
            with breaker:
                raise NumericError("boom")
        with breaker:
            pass
        assert breaker.state == "closed"
        assert breaker.failures == 0
        assert breaker.total_failures == 1

    def test_exceptions_propagate(self):
        breaker = MemberBreaker(name="test")
        with pytest.raises(ValueError):
            with breaker:
                raise ValueError("not swallowed")
