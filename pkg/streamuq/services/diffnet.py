"""
Differentiable Network Engine

A small numpy engine for the feature network: Conv1D / MaxPool1D / ReLU /
Dropout / Dense layers with hand-written reverse-mode gradients, the MAE
loss, the bi-Lipschitz distance penalty and Adam updates.

Layout conventions:
- a single input window is (window_length, channels); batches are
  (batch, window_length, channels)
- parameters live in an ordered dict keyed "<layer_index>.<name>"
  ("0.kernel", "0.bias", "6.weight", ...), plus any head parameters
  ("head.beta") when training through an output head

Usage:
    from services.diffnet import init_params, network_forward, backprop, adam_step, AdamState

    params = init_params(specs, (100, 9), rng)
    loss, grads = backprop(params, specs, inputs, targets, penalty_weight=0.1, head=head, rng=rng)
    params, state = adam_step(params, grads, state)
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.errors import ArgumentError, ConfigurationError, NumericError
from models import LayerSpec

logger = logging.getLogger(__name__)

NetworkParams = Dict[str, np.ndarray]

# Bi-Lipschitz band on ||h(x1) - h(x2)|| relative to ||x1 - x2||
LIPSCHITZ_LOWER = 0.75
LIPSCHITZ_UPPER = 1.25


# =============================================================================
# Structure & Initialization
# =============================================================================

def check_structure(specs: Sequence[LayerSpec]) -> None:
    """Conv blocks must come before dense blocks."""
    seen_dense = False
    for i, spec in enumerate(specs):
        if spec.kind == "dense":
            seen_dense = True
        elif spec.kind in ("conv1d", "maxpool1d") and seen_dense:
            raise ConfigurationError(f"layer {i} ({spec.kind}) follows a dense layer")


def layer_output_shapes(specs: Sequence[LayerSpec], input_shape: Tuple[int, ...]) -> List[Tuple[int, ...]]:
    """Per-layer output shapes (without batch axis) for a (window_length, channels) input."""
    check_structure(specs)
    if len(input_shape) != 2:
        raise ConfigurationError(f"input shape must be (window_length, channels), got {input_shape}")
    shape: Tuple[int, ...] = tuple(int(s) for s in input_shape)
    shapes = []
    for i, spec in enumerate(specs):
        if spec.kind == "conv1d":
            length = (shape[0] - spec.kernel_size) // spec.effective_stride + 1
            if len(shape) != 2 or shape[0] < spec.kernel_size:
                raise ConfigurationError(
                    f"layer {i}: conv1d kernel {spec.kernel_size} does not fit input of shape {shape}"
                )
            shape = (length, spec.filters)
        elif spec.kind == "maxpool1d":
            if len(shape) != 2 or shape[0] < spec.pool:
                raise ConfigurationError(f"layer {i}: maxpool1d pool {spec.pool} does not fit input of shape {shape}")
            shape = ((shape[0] - spec.pool) // spec.effective_stride + 1, shape[1])
        elif spec.kind == "dense":
            shape = (spec.units,)
        shapes.append(shape)
    return shapes


def output_dim(specs: Sequence[LayerSpec], input_shape: Tuple[int, ...]) -> int:
    shapes = layer_output_shapes(specs, input_shape)
    final = shapes[-1] if shapes else tuple(input_shape)
    return int(np.prod(final))


def init_params(specs: Sequence[LayerSpec], input_shape: Tuple[int, ...], rng: np.random.Generator) -> NetworkParams:
    """He-normal weights, zero biases."""
    shapes = layer_output_shapes(specs, input_shape)
    params: NetworkParams = {}
    prev: Tuple[int, ...] = tuple(input_shape)
    for i, (spec, out_shape) in enumerate(zip(specs, shapes)):
        if spec.kind == "conv1d":
            channels = prev[1]
            fan_in = spec.kernel_size * channels
            params[f"{i}.kernel"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.kernel_size, channels, spec.filters))
            params[f"{i}.bias"] = np.zeros(spec.filters)
        elif spec.kind == "dense":
            fan_in = int(np.prod(prev))
            params[f"{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, spec.units))
            params[f"{i}.bias"] = np.zeros(spec.units)
        prev = out_shape
    return params


# =============================================================================
# Layer Kernels
# =============================================================================

def _conv1d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int):
    k = kernel.shape[0]
    windows = sliding_window_view(x, k, axis=1)[:, ::stride]  # (B, Lo, C, k)
    out = np.einsum("blck,kcf->blf", windows, kernel, optimize=True) + bias
    return out, windows


def _conv1d_backward(x_shape, windows, kernel, stride, grad):
    k = kernel.shape[0]
    grad_kernel = np.einsum("blck,blf->kcf", windows, grad, optimize=True)
    grad_bias = grad.sum(axis=(0, 1))
    grad_x = np.zeros(x_shape)
    n_out = grad.shape[1]
    span = stride * (n_out - 1) + 1
    for j in range(k):
        grad_x[:, j:j + span:stride, :] += grad @ kernel[j].T
    return grad_x, grad_kernel, grad_bias


def _maxpool_forward(x: np.ndarray, pool: int, stride: int):
    windows = sliding_window_view(x, pool, axis=1)[:, ::stride]  # (B, Lo, C, pool)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _maxpool_backward(x_shape, arg, stride, grad):
    batch, n_out, channels = grad.shape
    grad_x = np.zeros(x_shape)
    rows = np.arange(batch)[:, None, None]
    positions = np.arange(n_out)[None, :, None] * stride + arg
    cols = np.arange(channels)[None, None, :]
    np.add.at(grad_x, (rows, positions, cols), grad)
    return grad_x


@dataclass
class _LayerCache:
    kind: str
    x_shape: Tuple[int, ...]
    data: Any = None


def _check_finite(values: np.ndarray, layer_index: int, stage: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite values in {stage} pass", layer_index=layer_index)


def _forward_layers(
    params: NetworkParams,
    specs: Sequence[LayerSpec],
    x: np.ndarray,
    training: bool,
    rng: Optional[np.random.Generator],
) -> Tuple[np.ndarray, List[_LayerCache]]:
    caches: List[_LayerCache] = []
    for i, spec in enumerate(specs):
        cache = _LayerCache(kind=spec.kind, x_shape=x.shape)
        if spec.kind == "conv1d":
            kernel = params[f"{i}.kernel"]
            if x.ndim != 3 or x.shape[2] != kernel.shape[1] or x.shape[1] < kernel.shape[0]:
                raise ConfigurationError(f"layer {i}: conv1d expects (*, >={kernel.shape[0]}, {kernel.shape[1]}), got {x.shape}")
            x, cache.data = _conv1d_forward(x, kernel, params[f"{i}.bias"], spec.effective_stride)
        elif spec.kind == "maxpool1d":
            if x.ndim != 3 or x.shape[1] < spec.pool:
                raise ConfigurationError(f"layer {i}: maxpool1d cannot pool input of shape {x.shape}")
            x, cache.data = _maxpool_forward(x, spec.pool, spec.effective_stride)
        elif spec.kind == "relu":
            cache.data = x > 0
            x = np.where(cache.data, x, 0.0)
        elif spec.kind == "dropout":
            if training and spec.rate > 0:
                if rng is None:
                    raise ArgumentError("dropout in training mode requires an rng")
                mask = (rng.random(x.shape) >= spec.rate) / (1.0 - spec.rate)
                cache.data = mask
                x = x * mask
        elif spec.kind == "dense":
            weight = params[f"{i}.weight"]
            flat = x.reshape(x.shape[0], -1)
            if flat.shape[1] != weight.shape[0]:
                raise ConfigurationError(f"layer {i}: dense expects {weight.shape[0]} inputs, got {flat.shape[1]}")
            cache.data = flat
            x = flat @ weight + params[f"{i}.bias"]
        _check_finite(x, i, "forward")
        caches.append(cache)
    return x, caches


def _backward_layers(
    params: NetworkParams,
    specs: Sequence[LayerSpec],
    caches: List[_LayerCache],
    grad: np.ndarray,
) -> Tuple[NetworkParams, np.ndarray]:
    grads: NetworkParams = {}
    for i in range(len(specs) - 1, -1, -1):
        spec, cache = specs[i], caches[i]
        if spec.kind == "conv1d":
            grad, grads[f"{i}.kernel"], grads[f"{i}.bias"] = _conv1d_backward(
                cache.x_shape, cache.data, params[f"{i}.kernel"], spec.effective_stride, grad
            )
        elif spec.kind == "maxpool1d":
            grad = _maxpool_backward(cache.x_shape, cache.data, spec.effective_stride, grad)
        elif spec.kind == "relu":
            grad = np.where(cache.data, grad, 0.0)
        elif spec.kind == "dropout":
            if cache.data is not None:
                grad = grad * cache.data
        elif spec.kind == "dense":
            grads[f"{i}.weight"] = cache.data.T @ grad
            grads[f"{i}.bias"] = grad.sum(axis=0)
            grad = (grad @ params[f"{i}.weight"].T).reshape(cache.x_shape)
        _check_finite(grad, i, "backward")
    return grads, grad


def network_forward(
    params: NetworkParams,
    specs: Sequence[LayerSpec],
    inputs: np.ndarray,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    Run the feature network.

    Accepts a single window (window_length, channels) or a batch
    (batch, window_length, channels); the batch axis is dropped again for a
    single window. Dropout is only active when `training` is set.
    """
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ConfigurationError(f"network input must be 2-D or 3-D, got shape {x.shape}")
    out, _ = _forward_layers(params, specs, x, training, rng)
    return out[0] if single else out


def flatten_features(h: np.ndarray) -> np.ndarray:
    return h.reshape(h.shape[0], -1)


# =============================================================================
# Losses
# =============================================================================

def mae_loss(predictions: np.ndarray, targets: np.ndarray) -> float:
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if predictions.size == 0 or predictions.size != targets.size:
        raise ArgumentError(
            f"mae_loss needs equal non-empty arrays, got {predictions.size} and {targets.size}"
        )
    return float(np.mean(np.abs(predictions - targets)))


def mae_grad(predictions: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Subgradient of MAE; sign(0) = 0 at ties."""
    return np.sign(predictions - targets) / predictions.size


class PenaltyValue(NamedTuple):
    value: float
    n_pairs: int

    @property
    def has_pairs(self) -> bool:
        return self.n_pairs > 0


def sample_pairs(batch_size: int, max_pairs: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """All unordered within-batch pairs, uniformly subsampled down to `max_pairs`."""
    if batch_size < 2:
        return np.zeros((0, 2), dtype=np.int64)
    first, second = np.triu_indices(batch_size, k=1)
    pairs = np.stack([first, second], axis=1)
    if len(pairs) > max_pairs:
        if rng is None:
            raise ArgumentError("subsampling pairs requires an rng")
        keep = np.sort(rng.choice(len(pairs), size=max_pairs, replace=False))
        pairs = pairs[keep]
    return pairs


def _bilip_terms(inputs: np.ndarray, features: np.ndarray, pairs: np.ndarray):
    x = inputs.reshape(inputs.shape[0], -1)
    h = flatten_features(features)
    dx = np.linalg.norm(x[pairs[:, 0]] - x[pairs[:, 1]], axis=1)
    diff_h = h[pairs[:, 0]] - h[pairs[:, 1]]
    dh = np.linalg.norm(diff_h, axis=1)
    lower = np.maximum(0.0, LIPSCHITZ_LOWER * dx - dh)
    upper = np.maximum(0.0, dh - LIPSCHITZ_UPPER * dx)
    return diff_h, dh, lower, upper


def bilip_penalty_from_features(
    inputs: np.ndarray,
    features: np.ndarray,
    pairs: Optional[np.ndarray] = None,
) -> PenaltyValue:
    """
    Mean hinge violation of L1*||x1-x2|| <= ||h(x1)-h(x2)|| <= L2*||x1-x2||
    over the given pairs (all pairs of the batch when omitted).
    """
    if pairs is None:
        pairs = sample_pairs(inputs.shape[0], max_pairs=inputs.shape[0] ** 2)
    if len(pairs) == 0:
        logger.debug("🧮 [DiffNet] bi-Lipschitz penalty has no pairs (batch < 2)")
        return PenaltyValue(0.0, 0)
    _, _, lower, upper = _bilip_terms(inputs, features, pairs)
    return PenaltyValue(float(np.mean(lower + upper)), len(pairs))


def bilip_penalty(
    params: NetworkParams,
    specs: Sequence[LayerSpec],
    inputs: np.ndarray,
    max_pairs: int = 64,
    rng: Optional[np.random.Generator] = None,
) -> PenaltyValue:
    """Penalty of the network's (inference-mode) feature map on a batch of windows."""
    inputs = np.asarray(inputs, dtype=np.float64)
    pairs = sample_pairs(inputs.shape[0], max_pairs, rng)
    if len(pairs) == 0:
        logger.debug("🧮 [DiffNet] bi-Lipschitz penalty has no pairs (batch < 2)")
        return PenaltyValue(0.0, 0)
    features = network_forward(params, specs, inputs, training=False)
    return bilip_penalty_from_features(inputs, features, pairs)


def _bilip_feature_grad(inputs, features, pairs) -> np.ndarray:
    diff_h, dh, lower, upper = _bilip_terms(inputs, features, pairs)
    safe = np.where(dh > 0, dh, 1.0)
    unit = np.where((dh > 0)[:, None], diff_h / safe[:, None], 0.0)
    # d/dh_a of the pair term; d/dh_b is the negative
    coeff = (upper > 0).astype(np.float64) - (lower > 0).astype(np.float64)
    pair_grad = coeff[:, None] * unit / len(pairs)
    grad = np.zeros((features.shape[0], unit.shape[1]))
    np.add.at(grad, pairs[:, 0], pair_grad)
    np.add.at(grad, pairs[:, 1], -pair_grad)
    return grad.reshape(features.shape)


# =============================================================================
# Composite Loss & Backprop
# =============================================================================

class OutputHead(Protocol):
    """Maps final hidden features to scalar predictions and back-propagates through itself."""

    def parameters(self) -> NetworkParams: ...

    def forward(self, features: np.ndarray) -> Tuple[np.ndarray, Any]: ...

    def backward(self, cache: Any, grad_predictions: np.ndarray) -> Tuple[np.ndarray, NetworkParams]: ...


class FirstUnitHead:
    """Reads the prediction off the first feature unit (no parameters)."""

    def parameters(self) -> NetworkParams:
        return {}

    def forward(self, features: np.ndarray) -> Tuple[np.ndarray, Any]:
        flat = flatten_features(features)
        return flat[:, 0], features.shape

    def backward(self, cache: Any, grad_predictions: np.ndarray) -> Tuple[np.ndarray, NetworkParams]:
        grad = np.zeros((grad_predictions.shape[0], int(np.prod(cache[1:]))))
        grad[:, 0] = grad_predictions
        return grad.reshape(cache), {}


def backprop(
    params: NetworkParams,
    specs: Sequence[LayerSpec],
    inputs: np.ndarray,
    targets: np.ndarray,
    penalty_weight: float = 0.0,
    head: Optional[OutputHead] = None,
    rng: Optional[np.random.Generator] = None,
    training: bool = True,
    max_pairs: int = 64,
) -> Tuple[float, NetworkParams]:
    """
    Loss and exact gradients of  MAE(head(h(x)), y) + penalty_weight * bilip(x, h(x)).

    Dropout masks are drawn once in the forward pass and reused by the
    backward pass; the rng is consumed in the order (dropout masks, pair
    sample), so re-running with an identically seeded rng reproduces the loss.
    `params` may include head parameters; they are read through `head`.
    """
    if penalty_weight < 0:
        raise ArgumentError("penalty_weight must be non-negative")
    head = head if head is not None else FirstUnitHead()
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).ravel()

    features, caches = _forward_layers(params, specs, inputs, training, rng)
    predictions, head_cache = head.forward(features)
    _check_finite(predictions, len(specs), "forward")
    loss = mae_loss(predictions, targets)

    grad_features, grads_head = head.backward(head_cache, mae_grad(predictions, targets))

    if penalty_weight > 0:
        pairs = sample_pairs(inputs.shape[0], max_pairs, rng)
        if len(pairs):
            penalty = bilip_penalty_from_features(inputs, features, pairs)
            loss += penalty_weight * penalty.value
            grad_features = grad_features + penalty_weight * _bilip_feature_grad(inputs, features, pairs)

    grads, _ = _backward_layers(params, specs, caches, grad_features)
    grads.update(grads_head)
    return loss, grads


# =============================================================================
# Adam
# =============================================================================

@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: NetworkParams = field(default_factory=dict)
    second_moment: NetworkParams = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            step=self.step,
            first_moment={k: v.copy() for k, v in self.first_moment.items()},
            second_moment={k: v.copy() for k, v in self.second_moment.items()},
        )


def adam_step(params: NetworkParams, gradients: NetworkParams, state: AdamState) -> Tuple[NetworkParams, AdamState]:
    """Bias-corrected Adam update; returns new params and a new state."""
    if set(gradients) != set(params):
        raise ArgumentError(f"gradient keys {sorted(gradients)} do not match parameter keys {sorted(params)}")
    if state.step < 0:
        raise ArgumentError("Adam step counter must be non-negative")

    new_state = state.copy()
    new_state.step += 1
    bias1 = 1.0 - new_state.beta1 ** new_state.step
    bias2 = 1.0 - new_state.beta2 ** new_state.step

    new_params: NetworkParams = {}
    for key, value in params.items():
        grad = gradients[key]
        if grad.shape != value.shape:
            raise ArgumentError(f"gradient for {key} has shape {grad.shape}, expected {value.shape}")
        m = new_state.first_moment.get(key)
        v = new_state.second_moment.get(key)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        elif m.shape != value.shape:
            raise ArgumentError(f"moment for {key} has shape {m.shape}, expected {value.shape}")
        m = new_state.beta1 * m + (1.0 - new_state.beta1) * grad
        v = new_state.beta2 * v + (1.0 - new_state.beta2) * (grad * grad)
        new_state.first_moment[key] = m
        new_state.second_moment[key] = v
        new_params[key] = value - new_state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + new_state.epsilon)
    return new_params, new_state
