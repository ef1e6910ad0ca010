"""
Model Training

Minibatch Adam epochs over windowed data for a DgpaModel, used both for the
offline pretraining of the base model and for the one-epoch fine-tuning
sessions of the online loop.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from core.config import NetworkConfig
from core.errors import ArgumentError
from services.calibration import MIN_CALIBRATION_SAMPLES, AlphaFit, CalibrationDataset, CoverageGrid, fit_alpha
from services.dgpa import DgpaModel, Windows, mean_path_head, predict_windows, update_head
from services.diffnet import backprop, adam_step, network_forward
from services.metrics import mae

logger = logging.getLogger(__name__)

# windows used to estimate the feature normalizer
NORMALIZER_SAMPLE = 4096


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float


@dataclass
class PretrainResult:
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    alpha_fit: Optional[AlphaFit] = None


def train_epoch(
    model: DgpaModel,
    batch: Windows,
    penalty_weight: float = 0.1,
    batch_size: int = 64,
    max_pairs: int = 64,
    max_windows: int = 0,
) -> float:
    """
    One shuffled pass of minibatch Adam over `batch`, updating the feature
    network and the mean-path weights jointly. Returns the mean minibatch loss.

    With `max_windows` > 0 the pass stops after that many shuffled windows.
    """
    if len(batch) == 0:
        raise ArgumentError("cannot train on an empty batch")
    params = model.trainable_params()
    head = mean_path_head(model, params)
    order = model.rng.permutation(len(batch))
    if max_windows > 0:
        order = order[:max_windows]
    losses = []
    for start in range(0, len(order), batch_size):
        inputs, targets = batch.gather(order[start:start + batch_size])
        loss, grads = backprop(
            params,
            model.specs,
            inputs,
            targets,
            penalty_weight=penalty_weight,
            head=head,
            rng=model.rng,
            training=True,
            max_pairs=max_pairs,
        )
        updated, model.optimizer = adam_step(params, grads, model.optimizer)
        # head reads beta through this dict
        params.update(updated)
        losses.append(loss)
    model.set_trainable_params(params)
    return float(np.mean(losses))


def fine_tune(model: DgpaModel, batch: Windows, network: NetworkConfig, max_windows: int = 0) -> float:
    """One online fine-tuning session: a single epoch over the member's buffer (capped at `max_windows` when > 0)."""
    return train_epoch(model, batch, network.penalty_weight, network.batch_size, network.bilip_max_pairs, max_windows)


def _sample_index(n: int, limit: int = NORMALIZER_SAMPLE) -> np.ndarray:
    if n <= limit:
        return np.arange(n)
    return np.linspace(0, n - 1, limit).astype(np.int64)


def refresh_normalizer(model: DgpaModel, batch: Windows) -> None:
    """Re-estimate the hidden-feature normalizer on (a fixed subsample of) `batch`."""
    index = _sample_index(len(batch))
    inputs, _ = batch.gather(index)
    features = network_forward(model.params, model.specs, inputs, training=False)
    model.normalizer.fit(features)


def calibrate(
    model: DgpaModel,
    batch: Windows,
    grid: Optional[CoverageGrid] = None,
    min_windows: int = MIN_CALIBRATION_SAMPLES,
) -> Optional[AlphaFit]:
    """Fit the model's alpha on `batch`; keeps the current alpha when the batch has fewer than `min_windows` windows."""
    if len(batch) < max(min_windows, MIN_CALIBRATION_SAMPLES):
        logger.warning(f"⚠️ [Training] {len(batch)} windows are too few to calibrate; alpha stays {model.alpha:.4g}")
        return None
    previous = model.alpha
    model.alpha = 1.0
    means, sigmas = predict_windows(model, batch)
    fit = fit_alpha(CalibrationDataset(means, sigmas, batch.targets), grid)
    model.alpha = fit.alpha if not fit.degenerate else previous
    return fit


def pretrain(
    model: DgpaModel,
    train: Windows,
    val: Windows,
    network: NetworkConfig,
    grid: Optional[CoverageGrid] = None,
    min_windows: int = MIN_CALIBRATION_SAMPLES,
) -> PretrainResult:
    """
    Train the base model until validation MAE has not improved for
    `patience` epochs (at most `max_epochs`), then restore the best epoch,
    freeze the feature normalizer, refit the GP head on the training windows
    and calibrate alpha on the validation windows.

    Each epoch starts from a fresh normalizer and a closed-form head on the
    current features, so the mean path never trains against stale weights.
    """
    if len(train) == 0:
        raise ArgumentError("pretraining set has no windows")
    monitor = val
    if len(val) == 0:
        logger.warning("⚠️ [Training] Validation split is empty; early stopping monitors training MAE")
        monitor = train

    result = PretrainResult()
    refresh_normalizer(model, train)
    update_head(model, train)

    if network.max_epochs == 0:
        logger.warning("⚠️ [Training] max_epochs = 0; keeping the initialized network weights")

    best_mae = float("inf")
    best_state = None
    stale = 0
    for epoch in range(1, network.max_epochs + 1):
        if epoch > 1:
            refresh_normalizer(model, train)
            update_head(model, train)
        loss = fine_tune(model, train, network)
        means, _ = predict_windows(model, monitor)
        val_mae = mae(means, monitor.targets)
        result.history.append(EpochRecord(epoch=epoch, train_loss=loss, val_mae=val_mae))
        logger.info(f"🏋️ [Training] epoch {epoch}: loss {loss:.5f}, val MAE {val_mae:.5f}")

        if val_mae < best_mae:
            best_mae = val_mae
            best_state = copy.deepcopy((model.params, model.head, model.normalizer, model.optimizer))
            result.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= network.patience:
                result.stopped_early = True
                logger.info(f"🛑 [Training] Early stop at epoch {epoch}; best epoch {result.best_epoch}")
                break

    if best_state is not None:
        model.params, model.head, model.normalizer, model.optimizer = best_state

    model.normalizer.freeze()
    update_head(model, train)
    result.alpha_fit = calibrate(model, monitor, grid, min_windows)
    return result
