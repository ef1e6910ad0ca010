"""
Unit Tests for the Online Ensemble

Tests the fusion rules, rolling buffers, the prequential online step with
member isolation, and whole-stream runs.
"""

import copy

import numpy as np
import pandas as pd
import pytest
from scipy.linalg import LinAlgError

import services.ensemble as ensemble
from core.config import validate_experiment_config
from core.errors import ArgumentError, NumericError, SequencingError
from models import ShotRecord
from services.artifacts import read_trial, write_trial
from services.dgpa import create_model, predict
from services.ensemble import (
    RollingBuffer,
    Strategy,
    create_ensemble,
    fuse_naive,
    fuse_uq,
    inverse_variance_weights,
    run_stream,
    run_trial,
    step,
)
from worker.tasks import plan_jobs, run_trial_jobs


@pytest.fixture
def base_model(experiment_config):
    return create_model(experiment_config.network.layer_specs(), (8, 2), n_features=16, seed=0)


def make_shot(shot_id, length=30, n_channels=2):
    rng = np.random.default_rng(shot_id)
    inputs = rng.normal(size=(n_channels, length))
    target = np.tanh(inputs.sum(axis=0)) + 0.01 * rng.normal(size=length)
    return ShotRecord(shot_id=shot_id, inputs=inputs, target=target)


def _config(raw, **sections):
    raw = copy.deepcopy(raw)
    for name, values in sections.items():
        raw[name].update(values)
    return validate_experiment_config(raw)


def _shots(n, start=0, length=30):
    return [make_shot(i, length=length) for i in range(start, start + n)]


# =============================================================================
# Fusion Rules
# =============================================================================

@pytest.mark.unit
class TestFuseUq:
    def test_equal_sigmas(self):
        mean, sigma = fuse_uq([0.0, 2.0], [1.0, 1.0])
        assert mean == pytest.approx(1.0)
        assert sigma == pytest.approx(1.0 / np.sqrt(2.0))

    def test_unequal_sigmas(self):
        np.testing.assert_allclose(inverse_variance_weights([1.0, 2.0]), [0.8, 0.2])
        mean, sigma = fuse_uq([1.0, 0.0], [1.0, 2.0])
        assert mean == pytest.approx(0.8)
        assert sigma == pytest.approx(1.25 ** -0.5)

    def test_single_member_unchanged(self):
        mean, sigma = fuse_uq([[0.3, -1.2]], [[0.5, 2.0]])
        np.testing.assert_array_equal(mean, [0.3, -1.2])
        np.testing.assert_array_equal(sigma, [0.5, 2.0])

    def test_weights_sum_to_one_and_sigma_shrinks(self, rng):
        sigmas = rng.uniform(0.1, 3.0, size=(5, 40))
        means = rng.normal(size=(5, 40))
        np.testing.assert_allclose(inverse_variance_weights(sigmas).sum(axis=0), 1.0, rtol=1e-14)
        _, fused = fuse_uq(means, sigmas)
        assert np.all(fused <= sigmas.min(axis=0))

    def test_permutation_invariant(self, rng):
        means, sigmas = rng.normal(size=(4, 10)), rng.uniform(0.5, 2.0, size=(4, 10))
        order = rng.permutation(4)
        a, b = fuse_uq(means, sigmas), fuse_uq(means[order], sigmas[order])
        np.testing.assert_allclose(a[0], b[0], rtol=1e-12)
        np.testing.assert_allclose(a[1], b[1], rtol=1e-12)

    def test_scale_consistent(self, rng):
        means, sigmas = rng.normal(size=(3, 10)), rng.uniform(0.5, 2.0, size=(3, 10))
        mean, sigma = fuse_uq(means, sigmas)
        scaled_mean, scaled_sigma = fuse_uq(means, 7.0 * sigmas)
        np.testing.assert_allclose(scaled_mean, mean, rtol=1e-12)
        np.testing.assert_allclose(scaled_sigma, 7.0 * sigma, rtol=1e-12)

    def test_minimum_variance(self):
        rng = np.random.default_rng(0)
        true_sigmas = np.array([0.5, 1.0, 2.0])
        draws = rng.normal(size=(3, 10_000)) * true_sigmas[:, None]
        sigmas = np.broadcast_to(true_sigmas[:, None], draws.shape)

        def mse_and_se(fused):
            sq = fused ** 2
            return sq.mean(), sq.std(ddof=1) / np.sqrt(sq.size)

        uq_mse, uq_se = mse_and_se(fuse_uq(draws, sigmas)[0])
        candidates = [fuse_naive(draws, sigmas)[0]] + [
            np.asarray(w) @ draws for w in ([1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.6, 0.3, 0.1])
        ]
        for fused in candidates:
            assert uq_mse <= mse_and_se(fused)[0] + 2.0 * uq_se

    def test_invalid_members(self):
        with pytest.raises(ArgumentError):
            fuse_uq([], [])
        with pytest.raises(ArgumentError):
            fuse_uq([1.0, 2.0], [1.0, 0.0])
        with pytest.raises(ArgumentError):
            fuse_uq([[1.0, 2.0]], [[1.0]])
        with pytest.raises(NumericError):
            fuse_uq([1.0, np.nan], [1.0, 1.0])


@pytest.mark.unit
class TestFuseNaive:
    def test_mean_ignores_sigma(self):
        mean, _ = fuse_naive([0.0, 2.0], [0.1, 5.0])
        assert mean == pytest.approx(1.0)

    def test_rms_sigma(self):
        _, sigma = fuse_naive([0.0, 0.0], [1.0, 2.0])
        assert sigma == pytest.approx(np.sqrt(2.5))

    def test_identical_members(self):
        mean, sigma = fuse_naive([[0.4, 0.1]] * 3, [[0.2, 0.9]] * 3)
        np.testing.assert_allclose(mean, [0.4, 0.1])
        np.testing.assert_allclose(sigma, [0.2, 0.9])

    def test_negative_sigma(self):
        with pytest.raises(ArgumentError):
            fuse_naive([0.0], [-1.0])


# =============================================================================
# Rolling Buffer
# =============================================================================

@pytest.mark.unit
class TestRollingBuffer:
    def test_fifo_eviction(self):
        buffer = RollingBuffer(capacity=3, window_length=8, stride=2)
        for shot in _shots(5):
            buffer.append(shot)
            assert len(buffer) <= 3
        assert buffer.shot_ids == [2, 3, 4]

    def test_windows_follow_contents(self):
        buffer = RollingBuffer(capacity=2, window_length=8, stride=2)
        for shot in _shots(3):
            buffer.append(shot)
        windows = buffer.windows()
        assert set(windows.shot_ids) == {1, 2}
        assert len(windows) == 2 * 12

    def test_held_out_predictions_are_pruned(self):
        buffer = RollingBuffer(capacity=1, window_length=8)
        held = ensemble.HeldOut(np.zeros(2), np.ones(2), np.zeros(2))
        buffer.append(make_shot(0), held)
        buffer.append(make_shot(1), held)
        assert list(buffer.held_out) == [1]

    def test_capacity_must_be_positive(self):
        with pytest.raises(ArgumentError):
            RollingBuffer(capacity=0)


# =============================================================================
# Ensemble Creation
# =============================================================================

@pytest.mark.unit
class TestCreateEnsemble:
    @pytest.mark.parametrize("strategy,sizes", [
        ("static", [1]),
        ("single_online", [2]),
        ("naive_ensemble", [1, 3]),
        ("uq_ensemble", [1, 3]),
    ])
    def test_member_buffers(self, base_model, experiment_config, strategy, sizes):
        state = create_ensemble(base_model, strategy, 11, experiment_config)
        assert [m.buffer.capacity for m in state.members] == sizes
        assert state.strategy is Strategy(strategy)
        assert state.cursor == -1

    def test_members_start_from_the_base_model(self, base_model, experiment_config, rng):
        state = create_ensemble(base_model, "uq_ensemble", 11, experiment_config)
        x = rng.normal(size=(3, 8, 2))
        expected = predict(base_model, x)
        for member in state.members:
            np.testing.assert_array_equal(predict(member.model, x)[1], expected[1])
            assert member.model is not base_model
            assert member.model.optimizer.step == 0
            assert member.model.optimizer.learning_rate == experiment_config.network.learning_rate
        assert state.members[0].model.seed != state.members[1].model.seed

    def test_unknown_strategy(self, base_model, experiment_config):
        with pytest.raises(ValueError):
            create_ensemble(base_model, "bagging", 0, experiment_config)


# =============================================================================
# Online Step
# =============================================================================

@pytest.mark.unit
class TestStep:
    def test_static_repeated_shots_identical(self, base_model, experiment_config):
        state = create_ensemble(base_model, "static", 1, experiment_config)
        shot = make_shot(0)
        first = step(state, shot)
        for shot_id in (1, 2):
            again = step(state, ShotRecord(shot_id=shot_id, inputs=shot.inputs, target=shot.target))
            np.testing.assert_array_equal(again.mean, first.mean)
            np.testing.assert_array_equal(again.sigma, first.sigma)

    def test_outcome_shapes(self, base_model, experiment_config):
        state = create_ensemble(base_model, "uq_ensemble", 1, experiment_config)
        outcome = step(state, make_shot(0))
        assert outcome.member_means.shape == (2, 12)
        assert outcome.mean.shape == outcome.sigma.shape == outcome.targets.shape == (12,)
        assert np.all(outcome.sigma > 0)
        np.testing.assert_allclose(outcome.member_weights.sum(axis=0), 1.0)
        np.testing.assert_array_equal(outcome.end_indices, np.arange(7, 30, 2))
        assert outcome.abs_errors.shape == (12,)
        assert outcome.wall_ms == 0.0
        assert state.cursor == 0

    def test_naive_weights_are_uniform(self, base_model, experiment_config):
        state = create_ensemble(base_model, "naive_ensemble", 1, experiment_config)
        outcome = step(state, make_shot(0))
        np.testing.assert_array_equal(outcome.member_weights, np.full((2, 12), 0.5))

    def test_buffers_follow_the_stream(self, base_model, experiment_config):
        state = create_ensemble(base_model, "uq_ensemble", 1, experiment_config)
        for shot in _shots(5):
            step(state, shot)
            assert state.members[0].buffer.shot_ids == [shot.shot_id]
        assert state.members[1].buffer.shot_ids == [2, 3, 4]

    def test_static_never_buffers(self, base_model, experiment_config):
        state = create_ensemble(base_model, "static", 1, experiment_config)
        step(state, make_shot(0))
        assert len(state.members[0].buffer) == 0

    def test_online_members_change(self, base_model, experiment_config, rng):
        state = create_ensemble(base_model, "single_online", 1, experiment_config)
        x = rng.normal(size=(4, 8, 2))
        before = predict(state.members[0].model, x)[0]
        step(state, make_shot(0))
        assert not np.array_equal(predict(state.members[0].model, x)[0], before)

    def test_out_of_order_shot(self, base_model, experiment_config):
        state = create_ensemble(base_model, "static", 1, experiment_config)
        step(state, make_shot(3))
        with pytest.raises(SequencingError):
            step(state, make_shot(3))
        with pytest.raises(SequencingError):
            step(state, make_shot(2))

    def test_prediction_ignores_the_shot_target(self, base_model, experiment_config):
        shots = _shots(4)
        sentinel = ShotRecord(shot_id=3, inputs=shots[3].inputs, target=np.full(30, 1e6))

        outcomes = []
        for last in (shots[3], sentinel):
            state = create_ensemble(base_model, "uq_ensemble", 5, experiment_config)
            for shot in shots[:3]:
                step(state, shot)
            outcomes.append(step(state, last))

        np.testing.assert_array_equal(outcomes[0].mean, outcomes[1].mean)
        np.testing.assert_array_equal(outcomes[0].sigma, outcomes[1].sigma)

    def test_short_shot_has_no_windows(self, base_model, experiment_config):
        state = create_ensemble(base_model, "uq_ensemble", 1, experiment_config)
        outcome = step(state, make_shot(0, length=5))
        assert outcome.mean.size == 0 and outcome.targets.size == 0
        assert state.cursor == 0

    def test_record_timings(self, base_model, experiment_raw):
        config = _config(experiment_raw, run={"record_timings": True})
        state = create_ensemble(base_model, "single_online", 1, config)
        assert step(state, make_shot(0)).wall_ms > 0.0


@pytest.mark.unit
class TestMemberIsolation:
    def test_failed_update_is_isolated(self, base_model, experiment_config, monkeypatch, rng):
        state = create_ensemble(base_model, "uq_ensemble", 1, experiment_config)
        target = state.members[1].model
        before = copy.deepcopy(target)
        real_fine_tune = ensemble.fine_tune
        calls = []

        def flaky(model, *args):
            if model is target and not calls:
                calls.append(model)
                raise NumericError("non-finite gradient", layer_index=0)
            return real_fine_tune(model, *args)

        monkeypatch.setattr(ensemble, "fine_tune", flaky)

        first = step(state, make_shot(0))
        assert first.failed_members == [1]
        assert state.members[1].breaker.is_open
        x = rng.normal(size=(3, 8, 2))
        for a, b in zip(predict(state.members[1].model, x), predict(before, x)):
            np.testing.assert_array_equal(a, b)

        second = step(state, make_shot(1))
        assert second.included.tolist() == [True, False]
        assert np.all(second.member_weights[1] == 0.0)
        np.testing.assert_array_equal(second.mean, second.member_means[0])
        assert not state.members[1].breaker.is_open

        third = step(state, make_shot(2))
        assert third.included.all()
        assert third.failed_members == []

    @pytest.mark.parametrize("error", [
        ArgumentError("cannot fit GP head on an empty buffer"),
        LinAlgError("singular matrix"),
        ValueError("array must not contain infs or NaNs"),
    ])
    def test_library_errors_roll_the_member_back(self, base_model, experiment_config, monkeypatch, rng, error):
        state = create_ensemble(base_model, "uq_ensemble", 1, experiment_config)
        target = state.members[1].model
        before = copy.deepcopy(target)
        real_features = ensemble.window_features

        def broken(model, windows):
            if model is target:
                raise error
            return real_features(model, windows)

        monkeypatch.setattr(ensemble, "window_features", broken)
        outcome = step(state, make_shot(0))

        assert outcome.failed_members == [1]
        # fine-tuning ran before the failure; the rollback undoes it
        x = rng.normal(size=(3, 8, 2))
        for a, b in zip(predict(target, x), predict(before, x)):
            np.testing.assert_array_equal(a, b)
        assert target.optimizer.step == before.optimizer.step
        assert target.alpha == before.alpha

    def test_failures_reach_the_trial_files(self, base_model, experiment_config, monkeypatch, tmp_path):
        real_fine_tune = ensemble.fine_tune
        seen = []

        def flaky(model, *args):
            seen.append(model)
            if len(seen) == 2:
                raise ArgumentError("window length does not match the network")
            return real_fine_tune(model, *args)

        monkeypatch.setattr(ensemble, "fine_tune", flaky)
        report = run_trial(base_model, "naive_ensemble", _shots(3), 0, 2, experiment_config)
        assert report.failed_members == [[0, 1]]

        write_trial(report, tmp_path)
        failures = pd.read_csv(tmp_path / "failures.csv")
        assert failures.to_dict("records") == [{"shot_id": 0, "member": 1}]
        assert read_trial(tmp_path).failed_members == [[0, 1]]

    def test_no_member_can_predict(self, base_model, experiment_config, monkeypatch):
        state = create_ensemble(base_model, "naive_ensemble", 1, experiment_config)

        def broken(model, inputs):
            raise NumericError("non-finite activation")

        monkeypatch.setattr(ensemble, "predict", broken)
        with pytest.raises(NumericError):
            step(state, make_shot(0))


# =============================================================================
# Stream Runs
# =============================================================================

@pytest.mark.unit
class TestRunStream:
    def test_empty_stream(self, base_model, experiment_config):
        reports = run_stream(base_model, "uq_ensemble", [], [1, 2], experiment_config)
        assert len(reports) == 2
        assert all(report.empty for report in reports)
        assert [report.seed for report in reports] == [1, 2]

    def test_report_rows(self, base_model, experiment_config):
        shots = _shots(3) + [make_shot(3, length=5)]
        report = run_trial(base_model, "naive_ensemble", shots, 0, 9, experiment_config)
        np.testing.assert_array_equal(report.shot_ids, [0, 1, 2])
        np.testing.assert_array_equal(report.n_windows, [12, 12, 12])
        assert report.member_weights.shape == (3, 2)
        assert report.y_pred.shape == (36,)
        assert report.aggregate_mae == pytest.approx(np.mean(report.abs_errors))
        np.testing.assert_array_equal(report.wall_ms, np.zeros(3))

    def test_single_member_ensemble_matches_single_online(self, base_model, experiment_raw):
        config = _config(experiment_raw, ensemble={"buffer_schedule": [2], "single_online_buffer": 2})
        shots = _shots(4)
        single = run_trial(base_model, "single_online", shots, 0, 21, config)
        fused = run_trial(base_model, "uq_ensemble", shots, 0, 21, config)
        np.testing.assert_array_equal(fused.mae, single.mae)
        np.testing.assert_array_equal(fused.sigma, single.sigma)

    def test_reproducible_per_seed(self, base_model, experiment_config):
        shots = _shots(4)
        first, second, other = run_stream(base_model, "naive_ensemble", shots, [5, 5, 6], experiment_config)
        np.testing.assert_array_equal(first.y_pred, second.y_pred)
        np.testing.assert_array_equal(first.sigma, second.sigma)
        assert not np.array_equal(first.y_pred, other.y_pred)

    def test_base_model_untouched(self, base_model, experiment_config, rng):
        x = rng.normal(size=(3, 8, 2))
        before = predict(base_model, x)
        run_trial(base_model, "uq_ensemble", _shots(3), 0, 1, experiment_config)
        np.testing.assert_array_equal(predict(base_model, x)[1], before[1])

    def test_calibration_curves_at_checkpoints(self, base_model, experiment_raw):
        config = _config(experiment_raw, run={"checkpoint_interval": 2})
        report = run_trial(base_model, "uq_ensemble", _shots(5), 0, 3, config)
        curves = report.checkpoint_curves
        # every second shot, then the tail
        assert curves["shot_id"].unique().tolist() == [1, 3, 4]
        assert curves.groupby("shot_id")["model"].unique().map(list).to_dict()[1] == ["member_0", "member_1", "fused"]
        n_levels = config.calibration.n_levels
        assert (curves.groupby(["shot_id", "model"]).size() == n_levels).all()

    def test_member_checkpoints(self, base_model, experiment_raw, tmp_path):
        config = _config(experiment_raw, run={"checkpoint_interval": 2})
        run_stream(base_model, "uq_ensemble", _shots(4), [3], config, checkpoint_root=tmp_path)
        written = sorted(p.name for p in (tmp_path / "uq_ensemble" / "trial_0").iterdir())
        assert written == [
            "member_0_shot_1.npz", "member_0_shot_3.npz",
            "member_1_shot_1.npz", "member_1_shot_3.npz",
        ]


# =============================================================================
# Parallelism
# =============================================================================

def _assert_same_trial(a, b):
    for name in ("y_pred", "sigma", "member_weights", "mean_sigma", "mae"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name), err_msg=name)
    assert a.failed_members == b.failed_members


@pytest.mark.unit
class TestParallelDeterminism:
    def test_member_threads_do_not_change_results(self, base_model, experiment_raw, monkeypatch):
        config = _config(experiment_raw, ensemble={"buffer_schedule": [1, 2, 3, 4]})
        shots = _shots(5)
        monkeypatch.setattr(ensemble.settings, "MEMBER_N_JOBS", 1)
        serial = run_trial(base_model, "uq_ensemble", shots, 0, 13, config)
        monkeypatch.setattr(ensemble.settings, "MEMBER_N_JOBS", 4)
        threaded = run_trial(base_model, "uq_ensemble", shots, 0, 13, config)
        _assert_same_trial(serial, threaded)

    @pytest.mark.integration
    def test_trial_workers_do_not_change_results(self, base_model, experiment_config, tmp_path):
        jobs = plan_jobs(["naive_ensemble", "uq_ensemble"], [3, 4])
        shots = _shots(4)
        serial = run_trial_jobs(jobs, base_model, shots, experiment_config, tmp_path / "serial", n_jobs=1)
        pooled = run_trial_jobs(jobs, base_model, shots, experiment_config, tmp_path / "pooled", n_jobs=2)
        assert [r.job for r in pooled] == jobs
        for a, b in zip(serial, pooled):
            assert a.ok and b.ok
            _assert_same_trial(a.report, b.report)
            directory = f"{a.job.strategy}/trial_{a.job.trial}"
            for name in ("predictions.csv", "weights.csv", "shots.csv"):
                assert (tmp_path / "serial" / directory / name).read_bytes() == (tmp_path / "pooled" / directory / name).read_bytes()
