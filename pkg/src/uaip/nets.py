"""Dense MLPs, Adam, and the linear temperature schedule.

Both networks used by the pursuit trainer are plain MLPs with rectifier
hidden layers and identity output. ``mlp_forward`` builds graph nodes for
training; ``mlp_apply`` is the graph-free path for inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, GraphError


@dataclass
class DenseLayer:
    weight: ad.Tensor2  # (fan_in, fan_out)
    bias: ad.Tensor2    # (1, fan_out)


def mlp_init(dims: Sequence[int], rng: np.random.Generator) -> list[DenseLayer]:
    """He-normal weights, zero biases. ``dims`` chains input through output."""
    if len(dims) < 2:
        raise ConfigError(f"mlp_init needs at least input and output dims, got {dims}")
    if any(d < 1 for d in dims):
        raise ConfigError(f"mlp dims must be positive, got {dims}")
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        layers.append(DenseLayer(ad.tensor(w), ad.tensor(np.zeros((1, fan_out)))))
    return layers


def _check_chain(layers: Sequence[DenseLayer], in_cols: int) -> None:
    cols = in_cols
    for i, layer in enumerate(layers):
        if layer.weight.rows != cols:
            raise ConfigError(
                f"layer {i} expects {layer.weight.rows} inputs, got {cols}"
            )
        cols = layer.weight.cols


def mlp_forward(
    layers: Sequence[DenseLayer],
    x: ad.Tensor2,
    dropout_rate: float = 0.0,
    keep_masks: Sequence[np.ndarray] | None = None,
) -> ad.Tensor2:
    """Graph-mode forward pass: relu on hidden layers, identity on output.

    When ``dropout_rate`` > 0, ``keep_masks`` must supply one boolean mask
    per hidden layer (post-activation).
    """
    _check_chain(layers, x.cols)
    if dropout_rate > 0.0 and (keep_masks is None or len(keep_masks) != len(layers) - 1):
        raise ConfigError("dropout requires one keep mask per hidden layer")
    out = x
    for i, layer in enumerate(layers):
        out = ad.add_bias(ad.matmul(out, layer.weight), layer.bias)
        if i < len(layers) - 1:
            out = ad.relu(out)
            if dropout_rate > 0.0:
                out = ad.dropout(out, keep_masks[i], dropout_rate)
    return out


def mlp_apply(
    layers: Sequence[DenseLayer],
    x: np.ndarray,
    dropout_rate: float = 0.0,
    keep_masks: Sequence[np.ndarray] | None = None,
) -> np.ndarray:
    """Graph-free forward pass, numerically identical to ``mlp_forward``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    _check_chain(layers, x.shape[1])
    if dropout_rate > 0.0 and (keep_masks is None or len(keep_masks) != len(layers) - 1):
        raise ConfigError("dropout requires one keep mask per hidden layer")
    out = x
    for i, layer in enumerate(layers):
        out = out @ layer.weight.value + layer.bias.value
        if i < len(layers) - 1:
            out = np.maximum(out, 0.0)
            if dropout_rate > 0.0:
                out = out * keep_masks[i] / (1.0 - dropout_rate)
    return out


def mlp_params(layers: Sequence[DenseLayer]) -> list[ad.Tensor2]:
    params: list[ad.Tensor2] = []
    for layer in layers:
        params.append(layer.weight)
        params.append(layer.bias)
    return params


def onehot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch on sign so neither exp can overflow.
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_init(params: Sequence[ad.Tensor2], lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    if lr <= 0:
        raise ConfigError(f"adam lr must be positive, got {lr}")
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
        m=[np.zeros_like(p.value) for p in params],
        v=[np.zeros_like(p.value) for p in params],
    )


def adam_step(params: Sequence[ad.Tensor2], grads: Sequence[np.ndarray],
              state: AdamState) -> None:
    """One Adam update, in place on the parameter values.

    A zero gradient leaves its parameter bit-identical at any step count.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise GraphError("adam_step: params/grads/state length mismatch")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.value.shape:
            raise GraphError(
                f"adam_step: grad shape {g.shape} != param shape {p.value.shape}"
            )
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.value -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TemperatureSchedule:
    """Linear annealing from ``start`` to ``end`` across training epochs.

    Endpoints are exact: value_at(0) == start and value_at(total-1) == end.
    A single-epoch run stays at ``start`` (there is nothing to anneal over).
    """

    start: float = 1.0
    end: float = 0.2

    def __post_init__(self) -> None:
        if self.start <= 0 or self.end <= 0:
            raise ConfigError("temperatures must be positive")

    def value_at(self, epoch: int, total_epochs: int) -> float:
        if total_epochs < 1:
            raise ConfigError(f"total_epochs must be >= 1, got {total_epochs}")
        if total_epochs == 1:
            return self.start
        epoch = min(max(epoch, 0), total_epochs - 1)
        if epoch == total_epochs - 1:
            return self.end
        return self.start + (self.end - self.start) * epoch / (total_epochs - 1)
