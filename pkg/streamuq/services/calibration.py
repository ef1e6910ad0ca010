"""
Uncertainty Calibration

Scalar recalibration of predicted standard deviations: find alpha so the
central intervals ŷ ± z_p·alpha·σ cover a fraction p of the targets across a
grid of nominal levels, plus the miscalibration area diagnostic.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Optional, Union

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import norm

from core.errors import ArgumentError

logger = logging.getLogger(__name__)

MIN_CALIBRATION_SAMPLES = 10

COARSE_ALPHAS = np.logspace(-2, 2, 41)
GOLDEN_TOLERANCE = 1e-3
_INV_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class CoverageGrid:
    levels: np.ndarray = field(default_factory=lambda: np.arange(1, 100) / 100.0)

    def __post_init__(self) -> None:
        levels = np.asarray(self.levels, dtype=np.float64)
        if levels.ndim != 1 or levels.size == 0:
            raise ArgumentError("coverage grid needs at least one level")
        if np.any(levels <= 0) or np.any(levels >= 1):
            raise ArgumentError("coverage levels must lie in (0, 1)")
        if np.any(np.diff(levels) <= 0):
            raise ArgumentError("coverage levels must be strictly increasing")
        object.__setattr__(self, "levels", levels)

    @classmethod
    def uniform(cls, n_levels: int = 99) -> "CoverageGrid":
        return cls(np.arange(1, n_levels + 1) / (n_levels + 1.0))

    def __len__(self) -> int:
        return int(self.levels.size)


@dataclass
class CalibrationDataset:
    means: np.ndarray
    sigmas: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=np.float64).ravel()
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64).ravel()
        self.targets = np.asarray(self.targets, dtype=np.float64).ravel()
        n = self.means.size
        if self.sigmas.size != n or self.targets.size != n:
            raise ArgumentError("calibration arrays must have equal lengths")
        if n < MIN_CALIBRATION_SAMPLES:
            raise ArgumentError(f"calibration needs at least {MIN_CALIBRATION_SAMPLES} samples, got {n}")
        if not (np.all(np.isfinite(self.means)) and np.all(np.isfinite(self.targets)) and np.all(np.isfinite(self.sigmas))):
            raise ArgumentError("calibration arrays must be finite")
        if np.any(self.sigmas <= 0):
            raise ArgumentError("predicted sigmas must be positive")

    def __len__(self) -> int:
        return int(self.means.size)

    @cached_property
    def abs_residuals(self) -> np.ndarray:
        return np.abs(self.targets - self.means)

    @cached_property
    def sorted_scores(self) -> np.ndarray:
        """|y - ŷ| / σ, ascending."""
        return np.sort(self.abs_residuals / self.sigmas)

    @property
    def degenerate(self) -> bool:
        return bool(np.all(self.abs_residuals == 0))


# =============================================================================
# Coverage
# =============================================================================

def std_normal_quantile(p: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Half-width z of the central standard-normal interval holding probability p."""
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p_arr)) or np.any(p_arr <= 0) or np.any(p_arr >= 1):
        raise ArgumentError(f"coverage level must lie in (0, 1), got {p}")
    z = norm.ppf((1.0 + p_arr) / 2.0)
    return float(z) if np.ndim(p) == 0 else z


def _check_alpha(alpha: float) -> None:
    if not alpha > 0:
        raise ArgumentError(f"alpha must be positive, got {alpha}")


def coverage_curve(data: CalibrationDataset, levels: np.ndarray, alpha: float) -> np.ndarray:
    """Empirical coverage at every level in one pass over the sorted scores."""
    _check_alpha(alpha)
    bounds = np.asarray(std_normal_quantile(np.asarray(levels, dtype=np.float64))) * alpha
    return np.searchsorted(data.sorted_scores, bounds, side="right") / len(data)


def empirical_coverage(data: CalibrationDataset, p: float, alpha: float) -> float:
    return float(coverage_curve(data, np.array([p]), alpha)[0])


def miscalibration_loss(data: CalibrationDataset, grid: Optional[CoverageGrid] = None, alpha: float = 1.0) -> float:
    grid = grid or CoverageGrid()
    return float(np.mean(np.abs(coverage_curve(data, grid.levels, alpha) - grid.levels)))


# =============================================================================
# Alpha Search
# =============================================================================

class AlphaFit(NamedTuple):
    alpha: float
    loss: float
    degenerate: bool = False


def fit_alpha(data: CalibrationDataset, grid: Optional[CoverageGrid] = None) -> AlphaFit:
    """
    Minimize the miscalibration loss over alpha > 0.

    Coarse search on 41 log-spaced points in [1e-2, 1e2], then golden-section
    refinement in log-alpha on the bracket around the coarse minimum until its
    relative width is at most 1e-3. The returned loss never exceeds the loss
    at alpha = 1.
    """
    grid = grid or CoverageGrid()

    def loss(alpha: float) -> float:
        return miscalibration_loss(data, grid, alpha)

    if data.degenerate:
        logger.warning("⚠️ [Calibration] All residuals are zero; keeping alpha = 1.0")
        return AlphaFit(1.0, loss(1.0), degenerate=True)

    coarse_losses = np.array([loss(a) for a in COARSE_ALPHAS])
    best = int(np.argmin(coarse_losses))
    lo = np.log(COARSE_ALPHAS[max(best - 1, 0)])
    hi = np.log(COARSE_ALPHAS[min(best + 1, len(COARSE_ALPHAS) - 1)])

    c = hi - _INV_GOLDEN * (hi - lo)
    d = lo + _INV_GOLDEN * (hi - lo)
    fc, fd = loss(np.exp(c)), loss(np.exp(d))
    while np.expm1(hi - lo) > GOLDEN_TOLERANCE:
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - _INV_GOLDEN * (hi - lo)
            fc = loss(np.exp(c))
        else:
            lo, c, fc = c, d, fd
            d = lo + _INV_GOLDEN * (hi - lo)
            fd = loss(np.exp(d))

    refined = float(np.exp((lo + hi) / 2.0))
    candidates = [
        AlphaFit(refined, loss(refined)),
        AlphaFit(float(COARSE_ALPHAS[best]), float(coarse_losses[best])),
        AlphaFit(1.0, loss(1.0)),
    ]
    # first candidate wins ties
    result = min(candidates, key=lambda fit: fit.loss)
    logger.debug(f"🎯 [Calibration] alpha* = {result.alpha:.4g} (loss {result.loss:.4f}, n={len(data)})")
    return result


# =============================================================================
# Miscalibration Area
# =============================================================================

@dataclass
class CalibrationCurve:
    levels: np.ndarray     # nominal coverage
    coverage: np.ndarray   # empirical coverage
    area: float


def miscalibration_area(
    data: CalibrationDataset,
    alpha: float = 1.0,
    grid: Optional[CoverageGrid] = None,
) -> CalibrationCurve:
    """
    Area between the coverage curve and the diagonal (trapezoid rule).

    The zero-width interval (p = 0, coverage 0) and the unbounded one
    (p = 1, coverage 1) close the curve at both ends, so the area lies in
    [0, 0.5] and tends to 0.5 when every interval covers everything or
    nothing.
    """
    grid = grid or CoverageGrid()
    coverage = coverage_curve(data, grid.levels, alpha)
    levels = np.concatenate([[0.0], grid.levels, [1.0]])
    closed = np.concatenate([[0.0], coverage, [1.0]])
    area = float(trapezoid(np.abs(closed - levels), levels))
    return CalibrationCurve(levels=grid.levels, coverage=coverage, area=area)
