"""
Distance-Aware GP Head

A random Fourier feature (RFF) approximation of an RBF-kernel Gaussian
process sitting on top of the feature network:

    h~  = normalize(h(x))                      frozen after pretraining
    Phi = sqrt(2/m) * cos(W h~ + b)            W ~ N(0, 1/l^2), b ~ U[0, 2pi)
    mean  = beta . Phi
    sigma = alpha * sqrt(Phi^T Lambda^-1 Phi + floor)

Lambda = tau*I + sum_j Phi_j Phi_j^T over the member's buffer, refit in
closed form together with beta after every fine-tuning session.

Usage:
    from services.dgpa import create_model, predict, update_head

    model = create_model(specs, (100, 9), n_features=512, seed=7)
    mean, sigma = predict(model, windows)
"""

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from core.checkpoint import read_npz, write_npz
from core.errors import ArgumentError, NotPositiveDefiniteError, NumericError
from core.resilience import with_numeric_retry
from models import LayerSpec, WindowBatch, WindowSet
from services.diffnet import (
    AdamState,
    NetworkParams,
    flatten_features,
    init_params,
    network_forward,
    output_dim,
)

logger = logging.getLogger(__name__)

HEAD_BETA = "head.beta"

Windows = Union[WindowBatch, WindowSet]


# =============================================================================
# Random Fourier Features
# =============================================================================

@dataclass
class RffProjection:
    weight: np.ndarray  # (m, D)
    phase: np.ndarray   # (m,)
    length_scale: float = 1.0

    @property
    def n_features(self) -> int:
        return int(self.weight.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.weight.shape[1])

    @classmethod
    def draw(cls, input_dim: int, n_features: int, length_scale: float, rng: np.random.Generator) -> "RffProjection":
        if n_features < 1 or input_dim < 1:
            raise ArgumentError("RFF projection needs at least one feature and one input dimension")
        if length_scale <= 0:
            raise ArgumentError(f"length_scale must be positive, got {length_scale}")
        weight = rng.normal(0.0, 1.0 / length_scale, size=(n_features, input_dim))
        phase = rng.uniform(0.0, 2.0 * np.pi, size=n_features)
        return cls(weight=weight, phase=phase, length_scale=float(length_scale))


def _rff_pre_activation(proj: RffProjection, h: np.ndarray) -> np.ndarray:
    if h.shape[-1] != proj.input_dim:
        raise ArgumentError(f"RFF projection expects dimension {proj.input_dim}, got {h.shape[-1]}")
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite hidden features entering the RFF projection")
    return h @ proj.weight.T + proj.phase


def rff_features(proj: RffProjection, h: np.ndarray) -> np.ndarray:
    """Phi(h) for a single vector (D,) or a batch (N, D)."""
    h = np.asarray(h, dtype=np.float64)
    return np.sqrt(2.0 / proj.n_features) * np.cos(_rff_pre_activation(proj, h))


# =============================================================================
# Feature Normalizer
# =============================================================================

@dataclass
class FeatureNormalizer:
    """
    Centers hidden features per dimension and divides by one scalar so the
    layer's total variance is 1; typical distances between normalized
    features are then O(1) and a unit length scale is meaningful.
    """
    center: np.ndarray
    scale: float = 1.0
    frozen: bool = False

    @classmethod
    def identity(cls, dim: int) -> "FeatureNormalizer":
        return cls(center=np.zeros(dim), scale=1.0)

    def fit(self, h: np.ndarray) -> "FeatureNormalizer":
        if self.frozen:
            raise ArgumentError("feature normalizer is frozen")
        h = flatten_features(np.asarray(h, dtype=np.float64))
        self.center = h.mean(axis=0)
        total = float(np.sqrt(h.var(axis=0).sum()))
        self.scale = total if total > 1e-12 else 1.0
        return self

    def freeze(self) -> None:
        self.frozen = True

    def apply(self, h: np.ndarray) -> np.ndarray:
        return (h - self.center) / self.scale


# =============================================================================
# GP Head
# =============================================================================

@dataclass
class GpHead:
    beta: np.ndarray        # (m,)
    precision: np.ndarray   # (m, m), SPD
    ridge: float = 1.0
    _factor: Any = field(default=None, repr=False)

    @classmethod
    def prior(cls, n_features: int, ridge: float = 1.0) -> "GpHead":
        if ridge <= 0:
            raise ArgumentError(f"ridge must be positive, got {ridge}")
        return cls(beta=np.zeros(n_features), precision=ridge * np.eye(n_features), ridge=float(ridge))

    def regularize(self) -> None:
        """Lambda <- Lambda + tau*I."""
        self.precision = self.precision + self.ridge * np.eye(self.precision.shape[0])
        self._factor = None

    @with_numeric_retry(max_attempts=3, regularize=lambda head: head.regularize())
    def factor(self):
        if self._factor is None:
            if not np.all(np.isfinite(self.precision)):
                raise NumericError("precision matrix has non-finite entries")
            try:
                self._factor = cho_factor(self.precision, lower=True, check_finite=False)
            except LinAlgError as e:
                raise NotPositiveDefiniteError(f"precision matrix is not positive definite: {e}") from e
        return self._factor

    def fit(self, phi: np.ndarray, targets: np.ndarray) -> "GpHead":
        """Full recompute: Lambda = tau*I + Phi^T Phi, beta = Lambda^-1 Phi^T y."""
        phi = np.asarray(phi, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64).ravel()
        if phi.shape[0] == 0:
            raise ArgumentError("cannot fit GP head on an empty buffer")
        if phi.shape[0] != targets.shape[0]:
            raise ArgumentError(f"{phi.shape[0]} feature rows but {targets.shape[0]} targets")
        return self.fit_statistics(phi.T @ phi, phi.T @ targets)

    def fit_statistics(self, gram: np.ndarray, moment: np.ndarray) -> "GpHead":
        """Refit from accumulated Phi^T Phi and Phi^T y."""
        self.precision = self.ridge * np.eye(gram.shape[0]) + gram
        self._factor = None
        self.beta = cho_solve(self.factor(), moment)
        return self

    def epistemic_variance(self, phi: np.ndarray) -> np.ndarray:
        """Phi^T Lambda^-1 Phi per row."""
        phi = np.atleast_2d(phi)
        solved = cho_solve(self.factor(), phi.T)
        return np.einsum("nm,mn->n", phi, solved)


# =============================================================================
# DGPA Model
# =============================================================================

@dataclass
class ModelState:
    """The parts of a model an online update mutates."""
    params: NetworkParams
    beta: np.ndarray
    precision: np.ndarray
    alpha: float
    optimizer: AdamState
    rng_state: dict


@dataclass
class DgpaModel:
    specs: List[LayerSpec]
    params: NetworkParams
    projection: RffProjection
    normalizer: FeatureNormalizer
    head: GpHead
    input_shape: Tuple[int, int]
    alpha: float = 1.0
    noise_floor: float = 1e-4
    seed: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    optimizer: AdamState = field(default_factory=AdamState)

    def __post_init__(self) -> None:
        if self.projection.input_dim != self.normalizer.center.shape[0]:
            raise ArgumentError("normalizer dimension does not match the RFF projection")
        if self.alpha <= 0:
            raise ArgumentError(f"alpha must be positive, got {self.alpha}")

    @property
    def feature_dim(self) -> int:
        return self.projection.input_dim

    def hidden(self, inputs: np.ndarray, training: bool = False) -> np.ndarray:
        """Normalized final hidden features, (N, D)."""
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim == 2:
            inputs = inputs[None]
        h = network_forward(self.params, self.specs, inputs, training=training, rng=self.rng if training else None)
        return self.normalizer.apply(flatten_features(h))

    def phi(self, inputs: np.ndarray) -> np.ndarray:
        return rff_features(self.projection, self.hidden(inputs))

    def trainable_params(self) -> NetworkParams:
        """Network parameters plus the mean-path weights, as one dict for backprop and Adam."""
        return {**self.params, HEAD_BETA: self.head.beta}

    def set_trainable_params(self, params: NetworkParams) -> None:
        self.params = {k: v for k, v in params.items() if k != HEAD_BETA}
        self.head.beta = params[HEAD_BETA]

    def reseed(self, seed: int) -> None:
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)

    def snapshot(self) -> ModelState:
        return ModelState(
            params={k: v.copy() for k, v in self.params.items()},
            beta=self.head.beta.copy(),
            precision=self.head.precision.copy(),
            alpha=self.alpha,
            optimizer=self.optimizer.copy(),
            rng_state=copy.deepcopy(self.rng.bit_generator.state),
        )

    def restore(self, state: ModelState) -> None:
        """Roll back to a snapshot; the normalizer and projection are frozen online."""
        self.params = state.params
        self.head.beta = state.beta
        self.head.precision = state.precision
        self.head._factor = None
        self.alpha = state.alpha
        self.optimizer = state.optimizer
        self.rng.bit_generator.state = state.rng_state


def create_model(
    specs: Sequence[LayerSpec],
    input_shape: Tuple[int, int],
    n_features: int = 512,
    length_scale: float = 1.0,
    ridge: float = 1.0,
    noise_floor: float = 1e-4,
    seed: int = 0,
    optimizer: Optional[AdamState] = None,
) -> DgpaModel:
    rng = np.random.default_rng(seed)
    specs = list(specs)
    params = init_params(specs, input_shape, rng)
    dim = output_dim(specs, input_shape)
    projection = RffProjection.draw(dim, n_features, length_scale, rng)
    return DgpaModel(
        specs=specs,
        params=params,
        projection=projection,
        normalizer=FeatureNormalizer.identity(dim),
        head=GpHead.prior(n_features, ridge),
        input_shape=tuple(int(s) for s in input_shape),
        noise_floor=float(noise_floor),
        seed=int(seed),
        rng=rng,
        optimizer=optimizer if optimizer is not None else AdamState(),
    )


def predict(
    model: DgpaModel,
    inputs: np.ndarray,
    chunk_size: int = 4096,
) -> Tuple[Union[float, np.ndarray], Union[float, np.ndarray]]:
    """
    Single-pass mean and sigma.

    A single window (window_length, channels) gives scalars; a batch gives
    arrays of length N.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    single = inputs.ndim == 2
    if single:
        inputs = inputs[None]
    means, sigmas = [], []
    for start in range(0, inputs.shape[0], chunk_size):
        mean, sigma = predict_features(model, model.phi(inputs[start:start + chunk_size]))
        means.append(mean)
        sigmas.append(sigma)
    mean = np.concatenate(means) if means else np.zeros(0)
    sigma = np.concatenate(sigmas) if sigmas else np.zeros(0)
    if single:
        return float(mean[0]), float(sigma[0])
    return mean, sigma


def predict_features(model: DgpaModel, phi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and sigma from precomputed RFF features."""
    mean = phi @ model.head.beta
    variance = model.head.epistemic_variance(phi) + model.noise_floor
    return mean, model.alpha * np.sqrt(np.maximum(variance, 0.0))


def window_features(model: DgpaModel, windows: Windows, chunk_size: int = 2048) -> np.ndarray:
    """RFF features of every window, (N, m)."""
    parts = [model.phi(inputs) for inputs, _ in windows.chunks(chunk_size)]
    if not parts:
        return np.zeros((0, model.projection.n_features))
    return np.vstack(parts)


def predict_windows(model: DgpaModel, windows: Windows, chunk_size: int = 4096) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and sigma for every window of a batch or window set, in order."""
    means, sigmas = [], []
    for inputs, _ in windows.chunks(chunk_size):
        mean, sigma = predict(model, inputs, chunk_size)
        means.append(mean)
        sigmas.append(sigma)
    if not means:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(means), np.concatenate(sigmas)


def update_head(model: DgpaModel, windows: Windows, chunk_size: int = 2048) -> GpHead:
    """Refit Lambda and beta from scratch on the given buffer windows."""
    if len(windows) == 0:
        raise ArgumentError("update_head needs a non-empty buffer")
    m = model.projection.n_features
    gram = np.zeros((m, m))
    moment = np.zeros(m)
    for inputs, targets in windows.chunks(chunk_size):
        phi = model.phi(inputs)
        gram += phi.T @ phi
        moment += phi.T @ targets
    model.head.fit_statistics(gram, moment)
    return model.head


def clone_model(model: DgpaModel) -> DgpaModel:
    return copy.deepcopy(model)


# =============================================================================
# Mean Path for Backprop
# =============================================================================

class MeanPathHead:
    """
    Output head for diffnet.backprop: prediction = beta . Phi(normalize(h)).

    The normalizer and projection are constants; beta is read from the
    shared parameter dict so optimizer updates are seen on the next call.
    """

    def __init__(self, projection: RffProjection, normalizer: FeatureNormalizer, params: NetworkParams):
        self.projection = projection
        self.normalizer = normalizer
        self.params = params

    def parameters(self) -> NetworkParams:
        return {HEAD_BETA: self.params[HEAD_BETA]}

    def forward(self, features: np.ndarray):
        flat = flatten_features(features)
        pre = _rff_pre_activation(self.projection, self.normalizer.apply(flat))
        coeff = np.sqrt(2.0 / self.projection.n_features)
        phi = coeff * np.cos(pre)
        return phi @ self.params[HEAD_BETA], (features.shape, pre, phi)

    def backward(self, cache, grad_predictions: np.ndarray):
        shape, pre, phi = cache
        beta = self.params[HEAD_BETA]
        coeff = np.sqrt(2.0 / self.projection.n_features)
        grad_beta = phi.T @ grad_predictions
        grad_pre = -coeff * np.sin(pre) * (grad_predictions[:, None] * beta[None, :])
        grad_flat = (grad_pre @ self.projection.weight) / self.normalizer.scale
        return grad_flat.reshape(shape), {HEAD_BETA: grad_beta}


def mean_path_head(model: DgpaModel, params: NetworkParams) -> MeanPathHead:
    return MeanPathHead(model.projection, model.normalizer, params)


# =============================================================================
# Checkpoints
# =============================================================================

def save_model(model: DgpaModel, path: Path) -> Path:
    """Write a self-describing, byte-deterministic checkpoint."""
    arrays = {f"param.{k}": v for k, v in model.params.items()}
    arrays.update({
        "rff.weight": model.projection.weight,
        "rff.phase": model.projection.phase,
        "norm.center": model.normalizer.center,
        "head.beta": model.head.beta,
        "head.precision": model.head.precision,
    })
    opt = model.optimizer
    arrays.update({f"adam.m.{k}": v for k, v in opt.first_moment.items()})
    arrays.update({f"adam.v.{k}": v for k, v in opt.second_moment.items()})
    meta = {
        "specs": [spec.model_dump() for spec in model.specs],
        "param_keys": list(model.params),
        "input_shape": list(model.input_shape),
        "length_scale": model.projection.length_scale,
        "norm_scale": model.normalizer.scale,
        "norm_frozen": model.normalizer.frozen,
        "ridge": model.head.ridge,
        "alpha": model.alpha,
        "noise_floor": model.noise_floor,
        "seed": model.seed,
        "rng_state": model.rng.bit_generator.state,
        "adam": {
            "learning_rate": opt.learning_rate,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "epsilon": opt.epsilon,
            "step": opt.step,
            "keys": list(opt.first_moment),
        },
    }
    return write_npz(path, arrays, meta)


def load_model(path: Path) -> DgpaModel:
    arrays, meta = read_npz(path)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    adam = meta["adam"]
    optimizer = AdamState(
        learning_rate=adam["learning_rate"],
        beta1=adam["beta1"],
        beta2=adam["beta2"],
        epsilon=adam["epsilon"],
        step=adam["step"],
        first_moment={k: arrays[f"adam.m.{k}"] for k in adam["keys"]},
        second_moment={k: arrays[f"adam.v.{k}"] for k in adam["keys"]},
    )
    model = DgpaModel(
        specs=[LayerSpec.model_validate(spec) for spec in meta["specs"]],
        params={k: arrays[f"param.{k}"] for k in meta["param_keys"]},
        projection=RffProjection(arrays["rff.weight"], arrays["rff.phase"], meta["length_scale"]),
        normalizer=FeatureNormalizer(arrays["norm.center"], meta["norm_scale"], meta["norm_frozen"]),
        head=GpHead(beta=arrays["head.beta"], precision=arrays["head.precision"], ridge=meta["ridge"]),
        input_shape=tuple(meta["input_shape"]),
        alpha=meta["alpha"],
        noise_floor=meta["noise_floor"],
        seed=meta["seed"],
        rng=rng,
        optimizer=optimizer,
    )
    logger.info(f"📦 [DGPA] Loaded model from {path} (D={model.feature_dim}, m={model.projection.n_features})")
    return model
