"""Minimal differentiable neural substrate.

Dense layers with a fixed set of activations, hand-written backward passes,
cross-entropy, global-norm gradient clipping, SGD-momentum / Adam updates,
and a finite-difference gradient checker. Everything runs in float64 on
1-D vectors; there is no autodiff graph and no batching.

Conventions:
  * weights are (out, in), biases (out,)
  * dropout is applied after every hidden activation, never after the
    final layer, and only in "train" mode (inverted scaling, so inference
    needs no correction)
  * softmax may only appear on the final layer
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, StateError

ACTIVATIONS = ("relu", "sigmoid", "softplus", "softmax", "identity")

#: floor added inside every logarithm to keep saturated probabilities finite
LOG_EPS = 1e-12

#: sigmoid outputs are clamped into this open interval so attention values
#: stay strictly inside (0, 1) even for extreme logits
SIGMOID_CLAMP = 1e-15


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str


@dataclass
class Mlp:
    """An ordered stack of dense layers with per-layer activations."""

    layers: list[Layer]
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.layers:
            raise ShapeError("an Mlp needs at least one layer")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        for k, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.weight.ndim != 2 or layer.bias.ndim != 1:
                raise ShapeError(f"layer {k}: weight must be 2-D and bias 1-D")
            if layer.weight.shape[0] != layer.bias.shape[0]:
                raise ShapeError(f"layer {k}: weight rows != bias length")
            if not (np.isfinite(layer.weight).all() and np.isfinite(layer.bias).all()):
                raise NumericError(f"layer {k}: non-finite parameters")
            if layer.activation == "softmax" and k != len(self.layers) - 1:
                raise ShapeError("softmax may only appear on the final layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ShapeError("consecutive layer dimensions do not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def num_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def copy(self) -> "Mlp":
        return copy.deepcopy(self)


def build_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    hidden_activation: str = "relu",
    final_activation: str = "identity",
    dropout_rate: float = 0.0,
) -> Mlp:
    """Create an Mlp with Xavier-uniform weights and zero biases.

    `sizes` runs input -> hidden... -> output, so len(sizes) - 1 layers.
    """
    if len(sizes) < 2:
        raise ShapeError("need at least input and output sizes")
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        bias = np.zeros(fan_out)
        act = final_activation if k == len(sizes) - 2 else hidden_activation
        layers.append(Layer(weight=weight, bias=bias, activation=act))
    return Mlp(layers=layers, dropout_rate=dropout_rate)


# ---------------------------------------------------------------------------
# activations


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max()
    e = np.exp(shifted)
    return e / e.sum()


def _apply_activation(tag: str, z: np.ndarray) -> np.ndarray:
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "sigmoid":
        out = 1.0 / (1.0 + np.exp(-z))
        return np.clip(out, SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    if tag == "softplus":
        return np.logaddexp(0.0, z)
    if tag == "softmax":
        return _softmax(z)
    if tag == "identity":
        return z
    raise ValueError(f"unknown activation {tag!r}")


def _activation_backward(tag: str, z: np.ndarray, h: np.ndarray, grad_h: np.ndarray) -> np.ndarray:
    """Gradient through the activation: d loss/d z given d loss/d h."""
    if tag == "relu":
        return grad_h * (z > 0.0)
    if tag == "sigmoid":
        return grad_h * h * (1.0 - h)
    if tag == "softplus":
        return grad_h / (1.0 + np.exp(-z))
    if tag == "softmax":
        return h * (grad_h - float(h @ grad_h))
    if tag == "identity":
        return grad_h
    raise ValueError(f"unknown activation {tag!r}")


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    """Per-layer records from one forward call, consumed by mlp_backward."""

    net_id: int
    mode: str
    inputs: list[np.ndarray]  # input to each layer's linear map
    preacts: list[np.ndarray]  # z = W x + b
    acts: list[np.ndarray]  # h = activation(z), before dropout
    masks: list[np.ndarray | None]  # dropout keep-masks (None where unused)


def mlp_forward(
    net: Mlp,
    x: np.ndarray,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a single input vector.

    In "train" mode dropout is active between hidden layers and `rng` is
    required when the net has a non-zero dropout rate; "infer" mode is
    deterministic.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != net.in_dim:
        raise ShapeError(f"input length {x.shape} does not match in_dim {net.in_dim}")
    if not np.isfinite(x).all():
        raise NumericError("non-finite input")
    drop = mode == "train" and net.dropout_rate > 0.0
    if drop and rng is None:
        raise StateError("train-mode forward with dropout needs an rng")

    inputs, preacts, acts, masks = [], [], [], []
    a = x
    last = len(net.layers) - 1
    for k, layer in enumerate(net.layers):
        z = layer.weight @ a + layer.bias
        h = _apply_activation(layer.activation, z)
        mask = None
        if drop and k < last:
            mask = rng.random(h.shape) >= net.dropout_rate
            h_out = h * mask / (1.0 - net.dropout_rate)
        else:
            h_out = h
        inputs.append(a)
        preacts.append(z)
        acts.append(h)
        masks.append(mask)
        a = h_out
    cache = ForwardCache(net_id=id(net), mode=mode, inputs=inputs, preacts=preacts, acts=acts, masks=masks)
    return a, cache


@dataclass
class GradientBuffer:
    """Per-parameter gradient tensors mirroring an Mlp's shape."""

    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]
    count: int = 0

    @classmethod
    def zeros_like(cls, net: Mlp) -> "GradientBuffer":
        return cls(
            weight_grads=[np.zeros_like(l.weight) for l in net.layers],
            bias_grads=[np.zeros_like(l.bias) for l in net.layers],
        )

    def matches(self, net: Mlp) -> bool:
        return len(self.weight_grads) == len(net.layers) and all(
            wg.shape == l.weight.shape and bg.shape == l.bias.shape
            for wg, bg, l in zip(self.weight_grads, self.bias_grads, net.layers)
        )

    def add_(self, other: "GradientBuffer", scale: float = 1.0) -> None:
        for mine, theirs in zip(self.weight_grads, other.weight_grads):
            mine += scale * theirs
        for mine, theirs in zip(self.bias_grads, other.bias_grads):
            mine += scale * theirs
        self.count += other.count if other.count else 1

    def scale_(self, factor: float) -> None:
        for g in self.weight_grads:
            g *= factor
        for g in self.bias_grads:
            g *= factor

    def zero_(self) -> None:
        for g in self.weight_grads:
            g[:] = 0.0
        for g in self.bias_grads:
            g[:] = 0.0
        self.count = 0

    def squared_norm(self) -> float:
        total = 0.0
        for g in self.weight_grads:
            total += float((g * g).sum())
        for g in self.bias_grads:
            total += float((g * g).sum())
        return total

    def is_finite(self) -> bool:
        return all(np.isfinite(g).all() for g in self.weight_grads) and all(
            np.isfinite(g).all() for g in self.bias_grads
        )


def mlp_backward(
    net: Mlp, cache: ForwardCache, grad_output: np.ndarray
) -> tuple[GradientBuffer, np.ndarray]:
    """Exact backward pass for one forward call.

    Returns the parameter gradients and the gradient with respect to the
    network input (needed when nets are composed). Dropout masks from the
    cached forward pass are reused.
    """
    if cache.net_id != id(net) or len(cache.inputs) != len(net.layers):
        raise StateError("cache does not belong to this network / forward call")
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if grad_output.shape != (net.out_dim,):
        raise ShapeError(f"grad_output shape {grad_output.shape} != ({net.out_dim},)")

    buf = GradientBuffer.zeros_like(net)
    buf.count = 1
    g = grad_output
    last = len(net.layers) - 1
    for k in range(last, -1, -1):
        layer = net.layers[k]
        if cache.masks[k] is not None:
            g = g * cache.masks[k] / (1.0 - net.dropout_rate)
        gz = _activation_backward(layer.activation, cache.preacts[k], cache.acts[k], g)
        buf.weight_grads[k][:] = np.outer(gz, cache.inputs[k])
        buf.bias_grads[k][:] = gz
        g = layer.weight.T @ gz
    return buf, g


# ---------------------------------------------------------------------------
# loss, clipping, optimizers


def cross_entropy(predicted: np.ndarray, target: int) -> float:
    """Negative log-likelihood of `target` under `predicted`, floored at LOG_EPS."""
    predicted = np.asarray(predicted, dtype=np.float64)
    if not np.isfinite(predicted).all() or predicted.min() < -1e-9:
        raise NumericError("predicted is not a valid distribution")
    if abs(float(predicted.sum()) - 1.0) > 1e-6:
        raise NumericError(f"predicted sums to {predicted.sum()}, not 1")
    if not 0 <= target < predicted.shape[0]:
        raise ValueError(f"target {target} out of range for {predicted.shape[0]} classes")
    return -math.log(float(predicted[target]) + LOG_EPS)


def clip_gradients(grads: Sequence[GradientBuffer], max_norm: float) -> Sequence[GradientBuffer]:
    """Scale the whole gradient set so its global L2 norm is <= max_norm.

    Scaling happens in place; gradient sets already below the threshold are
    returned untouched, which makes the operation idempotent.
    """
    if max_norm <= 0.0:
        raise ValueError("max_norm must be positive")
    for buf in grads:
        if not buf.is_finite():
            raise NumericError("non-finite gradient")
    total = math.sqrt(sum(buf.squared_norm() for buf in grads))
    # a single rescale can land 1 ulp above max_norm; repeat until it holds
    while total > max_norm:
        factor = max_norm / total
        for buf in grads:
            buf.scale_(factor)
        total = math.sqrt(sum(buf.squared_norm() for buf in grads))
    return grads


@dataclass
class OptimizerState:
    """SGD-momentum or Adam state over a fixed-order list of networks."""

    kind: str  # "sgd_momentum" | "adam"
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    slots: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be non-negative")

    @classmethod
    def sgd(cls, learning_rate: float = 0.01, momentum: float = 0.9, weight_decay: float = 1e-6):
        return cls(kind="sgd_momentum", learning_rate=learning_rate, momentum=momentum, weight_decay=weight_decay)

    @classmethod
    def adam(cls, learning_rate: float = 1e-3, weight_decay: float = 0.0):
        return cls(kind="adam", learning_rate=learning_rate, weight_decay=weight_decay)

    def _init_slots(self, nets: Sequence[Mlp]) -> None:
        per_net = 2 if self.kind == "adam" else 1
        for net in nets:
            tensors = []
            for _ in range(per_net):
                tensors.append(
                    (
                        [np.zeros_like(l.weight) for l in net.layers],
                        [np.zeros_like(l.bias) for l in net.layers],
                    )
                )
            self.slots.append(tensors)


def optimizer_step(
    state: OptimizerState, nets: Sequence[Mlp], grads: Sequence[GradientBuffer]
) -> None:
    """Apply one parameter update in place and bump the step counter."""
    if len(nets) != len(grads):
        raise ShapeError("nets and grads counts differ")
    for net, buf in zip(nets, grads):
        if not buf.matches(net):
            raise ShapeError("gradient buffer shape does not match its network")
    if not state.slots:
        state._init_slots(nets)
    state.step_count += 1

    for ni, (net, buf) in enumerate(zip(nets, grads)):
        for li, layer in enumerate(net.layers):
            for params, grad, slot_idx in (
                (layer.weight, buf.weight_grads[li], 0),
                (layer.bias, buf.bias_grads[li], 1),
            ):
                if state.kind == "sgd_momentum":
                    velocity = state.slots[ni][0][slot_idx][li]
                    velocity *= state.momentum
                    velocity -= state.learning_rate * (grad + state.weight_decay * params)
                    params += velocity
                else:  # adam
                    g = grad + state.weight_decay * params
                    m = state.slots[ni][0][slot_idx][li]
                    v = state.slots[ni][1][slot_idx][li]
                    m *= state.beta1
                    m += (1.0 - state.beta1) * g
                    v *= state.beta2
                    v += (1.0 - state.beta2) * g * g
                    m_hat = m / (1.0 - state.beta1**state.step_count)
                    v_hat = v / (1.0 - state.beta2**state.step_count)
                    params -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    worst: tuple | None = None  # (net index, "weight"|"bias", layer, flat index)


def grad_check(
    loss_fn: Callable[[], float],
    nets: Sequence[Mlp],
    analytic: Sequence[GradientBuffer],
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `loss_fn` must re-evaluate the loss from the nets' current parameters
    with dropout disabled and any rng frozen. Relative error per entry is
    |a - n| / max(|a|, |n|, 1e-8).
    """
    max_err = 0.0
    worst = None
    checked = 0
    for ni, (net, buf) in enumerate(zip(nets, analytic)):
        for li, layer in enumerate(net.layers):
            for tag, params, grads in (
                ("weight", layer.weight, buf.weight_grads[li]),
                ("bias", layer.bias, buf.bias_grads[li]),
            ):
                flat_p = params.reshape(-1)
                flat_g = grads.reshape(-1)
                for idx in range(flat_p.shape[0]):
                    orig = flat_p[idx]
                    flat_p[idx] = orig + h
                    up = loss_fn()
                    flat_p[idx] = orig - h
                    down = loss_fn()
                    flat_p[idx] = orig
                    numeric = (up - down) / (2.0 * h)
                    a = float(flat_g[idx])
                    err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                    checked += 1
                    if err > max_err:
                        max_err = err
                        worst = (ni, tag, li, idx)
    return GradCheckReport(max_rel_error=max_err, checked=checked, worst=worst)
