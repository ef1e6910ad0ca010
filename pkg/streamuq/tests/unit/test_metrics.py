"""
Unit Tests for Error & Uncertainty Metrics

Tests point metrics, REC curves, per-trial reports, checkpoint calibration
curves with their across-trial bands, and the summary table.
"""

import numpy as np
import pytest

from core.errors import ArgumentError
from models import StepOutcome
from services.diffnet import mae_loss
from services.calibration import CalibrationDataset, CoverageGrid, miscalibration_area
from services.metrics import (
    BAND_COLUMNS,
    CURVE_COLUMNS,
    FUSED_MODEL,
    CheckpointCurves,
    MetricReport,
    calibration_bands,
    calibration_curves,
    improvement,
    mae,
    mape,
    mean_std,
    moving_average,
    mse,
    rec_curve,
    shared_epsilon_max,
    summarize,
    uncertainty_error_correlation,
)


def make_report(strategy="uq_ensemble", trial=0, errors=(0.1, 0.2), n_windows=(4, 4), seed=0) -> MetricReport:
    """A report whose shot i has every window off by errors[i]."""
    rng = np.random.default_rng(seed)
    shot_ids, y_true, y_pred, sigma, shot_mae = [], [], [], [], []
    for i, (error, n) in enumerate(zip(errors, n_windows)):
        truth = rng.normal(size=n)
        shot_ids.append(np.full(n, i))
        y_true.append(truth)
        y_pred.append(truth + error)
        sigma.append(np.full(n, error + 0.05))
        shot_mae.append(error)
    return MetricReport(
        strategy=strategy,
        trial=trial,
        seed=seed,
        shot_ids=np.arange(len(errors)),
        mae=np.array(shot_mae),
        mse=np.array(shot_mae) ** 2,
        mape=np.array(shot_mae) * 100,
        mean_sigma=np.array(shot_mae) + 0.05,
        n_windows=np.array(n_windows),
        wall_ms=np.zeros(len(errors)),
        member_weights=np.ones((len(errors), 1)),
        window_shot_ids=np.concatenate(shot_ids),
        window_end_indices=np.concatenate([np.arange(n) for n in n_windows]),
        y_true=np.concatenate(y_true),
        y_pred=np.concatenate(y_pred),
        sigma=np.concatenate(sigma),
    )


@pytest.mark.unit
class TestPointMetrics:
    def test_exact_predictions(self):
        y = np.array([0.5, -1.0, 2.0])
        assert mae(y, y) == mse(y, y) == mape(y, y) == 0.0

    def test_mape_half(self):
        assert mape([1.0], [2.0]) == pytest.approx(50.0)

    def test_mape_floor(self):
        assert mape([0.001], [0.0], floor=1e-3) == pytest.approx(100.0)

    def test_mse(self):
        assert mse([1.0, 3.0], [0.0, 0.0]) == pytest.approx(5.0)

    def test_empty_input(self):
        with pytest.raises(ArgumentError):
            mape([], [])
        with pytest.raises(ArgumentError):
            mae([1.0], [1.0, 2.0])


@pytest.mark.unit
class TestMovingAverage:
    def test_constant_series(self):
        np.testing.assert_array_equal(moving_average(np.full(30, 2.5)), np.full(30, 2.5))

    def test_window_of_one_is_identity(self):
        series = np.array([3.0, -1.0, 4.0])
        np.testing.assert_array_equal(moving_average(series, k=1), series)

    def test_trailing(self):
        np.testing.assert_allclose(moving_average([0.0, 20.0], k=2), [0.0, 10.0])
        np.testing.assert_allclose(moving_average([3.0, 6.0, 9.0, 12.0], k=2), [3.0, 4.5, 7.5, 10.5])

    def test_invalid_window(self):
        with pytest.raises(ArgumentError):
            moving_average([1.0], k=0)


@pytest.mark.unit
class TestRecCurve:
    def test_zero_errors(self):
        curve = rec_curve(np.zeros(50), 1.0)
        np.testing.assert_array_equal(curve.accuracy, np.ones(200))
        assert curve.aoc == 0.0

    def test_step_at_midpoint(self):
        curve = rec_curve(np.full(100, 0.5), 1.0)
        assert curve.aoc == pytest.approx(0.5, abs=1.0 / 200)

    def test_uniform_errors(self):
        errors = np.random.default_rng(0).uniform(0.0, 2.0, size=100_000)
        assert rec_curve(errors, 2.0).aoc == pytest.approx(0.5, abs=0.01)

    def test_errors_beyond_range(self):
        curve = rec_curve(np.full(10, 5.0), 1.0)
        assert curve.aoc == pytest.approx(1.0)
        assert curve.accuracy[-1] == 0.0

    def test_monotone_and_bounded(self, rng):
        errors = np.abs(rng.normal(size=500))
        curve = rec_curve(errors, 1.5)
        assert np.all(np.diff(curve.accuracy) >= 0)
        assert 0.0 <= curve.aoc <= 1.0
        assert curve.epsilon_max == 1.5
        assert rec_curve(errors * 1.3, 1.5).aoc >= curve.aoc

    def test_invalid(self):
        with pytest.raises(ArgumentError):
            rec_curve([], 1.0)
        with pytest.raises(ArgumentError):
            rec_curve([0.1], 0.0)

    def test_shared_range_prefers_static(self):
        errors = {"uq_ensemble": np.linspace(0, 1, 101), "static": np.linspace(0, 10, 101)}
        assert shared_epsilon_max(errors) == pytest.approx(9.5)
        assert shared_epsilon_max({"uq_ensemble": np.linspace(0, 1, 101)}) == pytest.approx(0.95)
        assert shared_epsilon_max({"static": np.zeros(5)}) == 1.0


@pytest.mark.unit
class TestMetricReport:
    def test_aggregate_is_window_weighted(self):
        report = make_report(errors=(0.1, 0.4), n_windows=(3, 1))
        assert report.aggregate_mae == pytest.approx((3 * 0.1 + 0.4) / 4)

    def test_aggregate_matches_window_loss(self):
        report = make_report(errors=(0.1, 0.3, 0.2), n_windows=(5, 2, 7))
        assert report.aggregate_mae == pytest.approx(mae_loss(report.y_pred, report.y_true))

    def test_empty_report(self):
        report = MetricReport(strategy="static", trial=0, seed=1)
        assert report.empty
        assert np.isnan(report.aggregate_mae)
        assert report.rec(1.0) is None
        assert report.calibration() is None

    def test_calibration_needs_enough_windows(self):
        assert make_report(n_windows=(2, 2)).calibration() is None
        assert make_report(n_windows=(10, 10)).calibration() is not None

    def test_correlation(self):
        report = make_report(errors=(0.1, 0.2, 0.4), n_windows=(2, 2, 2))
        assert report.correlation() == pytest.approx(1.0)
        assert np.isnan(uncertainty_error_correlation([1.0, 1.0], [0.1, 0.2]))


@pytest.mark.unit
class TestSummarize:
    def test_mean_std(self):
        assert mean_std([2.0]) == (2.0, 0.0)
        mean, std = mean_std([1.0, 3.0])
        assert (mean, std) == (2.0, pytest.approx(np.sqrt(2.0)))
        assert mean_std([float("nan"), 4.0]) == (4.0, 0.0)

    def test_improvement(self):
        assert improvement(2.41e-2, 2.16e-2) == pytest.approx(10.37, abs=0.01)
        assert improvement(3.0, 3.0) == 0.0
        assert np.isnan(improvement(0.0, 1.0))

    def test_rows(self):
        reports = {
            "single_online": [make_report("single_online", t, errors=(0.2, 0.2), seed=t) for t in range(3)],
            "uq_ensemble": [make_report("uq_ensemble", t, errors=(0.1, 0.1), seed=t) for t in range(3)],
        }
        rows = {row["strategy"]: row for row in summarize(reports, epsilon_max=1.0)}

        baseline, method = rows["single_online"], rows["uq_ensemble"]
        assert baseline["trials"] == 3
        assert baseline["mae_mean"] == pytest.approx(0.2)
        assert baseline["mae_std"] == pytest.approx(0.0)
        assert baseline["mae_improvement_pct"] == pytest.approx(0.0)
        assert method["mae_improvement_pct"] == pytest.approx(50.0)
        assert method["aoc_mean"] < baseline["aoc_mean"]
        assert np.isnan(method["calibration_improvement_pct"])

    def test_without_baseline(self):
        rows = summarize({"static": [make_report("static")]})
        assert rows[0]["mae_std"] == 0.0
        assert np.isnan(rows[0]["mae_improvement_pct"])
        assert np.isnan(rows[0]["calibration_improvement_pct"])


def make_outcome(shot_id, rng, n_windows=12, included=(True, True), sigma=1.0):
    n_members = len(included)
    targets = rng.normal(size=n_windows)
    member_means = targets + sigma * rng.normal(size=(n_members, n_windows))
    member_sigmas = np.full((n_members, n_windows), sigma)
    mask = np.array(included)
    member_means[~mask] = np.nan
    member_sigmas[~mask] = np.nan
    return StepOutcome(
        shot_id=shot_id,
        member_means=member_means,
        member_sigmas=member_sigmas,
        member_weights=np.where(mask[:, None], 1.0 / mask.sum(), 0.0) * np.ones((n_members, n_windows)),
        included=mask,
        mean=member_means[mask].mean(axis=0),
        sigma=np.full(n_windows, sigma),
        targets=targets,
        end_indices=np.arange(n_windows),
    )


@pytest.mark.unit
class TestCheckpointCurves:
    def test_segments_close_at_each_checkpoint(self, rng):
        grid = CoverageGrid.uniform(9)
        curves = CheckpointCurves(2, grid)
        curves.add(make_outcome(0, rng))
        curves.add(make_outcome(1, rng))
        curves.checkpoint(1)
        assert not curves.pending
        curves.add(make_outcome(2, rng))
        assert curves.pending
        curves.checkpoint(2)

        table = curves.table()
        assert list(table.columns) == CURVE_COLUMNS
        assert table.groupby("shot_id")["model"].unique().map(list).to_dict() == {
            1: ["member_0", "member_1", FUSED_MODEL],
            2: ["member_0", "member_1", FUSED_MODEL],
        }
        assert (table.groupby(["shot_id", "model"]).size() == len(grid)).all()

    def test_curve_covers_only_its_segment(self, rng):
        grid = CoverageGrid.uniform(9)
        curves = CheckpointCurves(1, grid)
        curves.add(make_outcome(0, rng, included=(True,)))
        curves.checkpoint(0)
        late = make_outcome(1, rng, included=(True,))
        curves.add(late)
        curves.checkpoint(1)

        expected = miscalibration_area(CalibrationDataset(late.mean, late.sigma, late.targets), alpha=1.0, grid=grid)
        table = curves.table()
        fused = table[(table["model"] == FUSED_MODEL) & (table["shot_id"] == 1)]
        np.testing.assert_array_equal(fused["level"], expected.levels)
        np.testing.assert_array_equal(fused["coverage"], expected.coverage)
        assert (fused["area"] == expected.area).all()

    def test_excluded_member_contributes_no_windows(self, rng):
        curves = CheckpointCurves(2, CoverageGrid.uniform(9))
        curves.add(make_outcome(0, rng, included=(True, False)))
        curves.add(make_outcome(1, rng, n_windows=6))
        curves.checkpoint(1)
        # member 1 saw only 6 windows, too few for a curve
        assert sorted(curves.table()["model"].unique()) == ["fused", "member_0"]

    def test_empty(self):
        curves = CheckpointCurves(2)
        curves.checkpoint(0)
        assert curves.table().empty
        assert list(curves.table().columns) == CURVE_COLUMNS


@pytest.mark.unit
class TestCalibrationBands:
    def _reports(self, rng, n_trials):
        reports = []
        for trial in range(n_trials):
            curves = CheckpointCurves(1, CoverageGrid.uniform(9))
            for shot_id in range(2):
                curves.add(make_outcome(shot_id, rng, included=(True,), sigma=0.5 + trial))
                curves.checkpoint(shot_id)
            report = make_report("uq_ensemble", trial, seed=trial)
            report.checkpoint_curves = curves.table()
            reports.append(report)
        return {"uq_ensemble": reports}

    def test_long_table_keys_every_row(self, rng):
        curves = calibration_curves(self._reports(rng, 2))
        assert list(curves.columns) == ["strategy", "trial", *CURVE_COLUMNS]
        assert sorted(curves["trial"].unique()) == [0, 1]
        assert len(curves) == 2 * 2 * 2 * 9

    def test_mean_and_sample_std_across_trials(self, rng):
        curves = calibration_curves(self._reports(rng, 3))
        bands = calibration_bands(curves)
        assert list(bands.columns) == BAND_COLUMNS
        assert (bands["n_trials"] == 3).all()
        level = curves["level"].iloc[4]
        point = curves[(curves["model"] == "member_0") & (curves["shot_id"] == 1) & (curves["level"] == level)]
        row = bands[(bands["model"] == "member_0") & (bands["shot_id"] == 1) & (bands["level"] == level)].iloc[0]
        mean, std = mean_std(point["coverage"].tolist())
        assert row["coverage_mean"] == pytest.approx(mean)
        assert row["coverage_std"] == pytest.approx(std)

    def test_single_trial_has_zero_spread(self, rng):
        bands = calibration_bands(calibration_curves(self._reports(rng, 1)))
        assert (bands["coverage_std"] == 0.0).all()
        assert (bands["area_std"] == 0.0).all()

    def test_no_curves(self):
        bands = calibration_bands(calibration_curves({"static": [make_report("static")]}))
        assert bands.empty
        assert list(bands.columns) == BAND_COLUMNS
