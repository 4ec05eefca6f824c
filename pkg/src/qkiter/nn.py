"""Dense layers with hand-written backward passes, Adam and a cosine schedule.

Everything runs in float64. Layers accept either a single vector or a
(rows, features) matrix; batched inputs are treated row by row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

ACTIVATIONS = ("identity", "relu", "tanh")


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, n_in, n_out, activation, rng: np.random.Generator, zero=False):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias."""
        if zero:
            w = np.zeros((n_out, n_in))
        else:
            bound = 1.0 / math.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_out, n_in))
        return cls(w, np.zeros(n_out), activation)

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy(), self.activation)


def _check_input(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != layer.n_in:
        raise ShapeError(f"expected input of width {layer.n_in}, got shape {x.shape}")
    return x


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    return z


def preactivation(layer: DenseLayer, x) -> np.ndarray:
    x = _check_input(layer, x)
    return x @ layer.weight.T + layer.bias


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    return _activate(preactivation(layer, x), layer.activation)


def dense_backward(layer: DenseLayer, x, grad_out, pre=None):
    """Gradients of a dense layer given its input and the upstream gradient.

    Returns ``(grad_weight, grad_bias, grad_x)``. For batched input the
    parameter gradients are summed over rows. ``pre`` may be passed to skip
    recomputing the pre-activation.
    """
    x = _check_input(layer, x)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != x.shape[:-1] + (layer.n_out,):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match output "
            f"{x.shape[:-1] + (layer.n_out,)}"
        )
    if pre is None:
        pre = preactivation(layer, x)
    if layer.activation == "relu":
        gz = grad_out * (pre > 0)
    elif layer.activation == "tanh":
        gz = grad_out * (1.0 - np.tanh(pre) ** 2)
    else:
        gz = grad_out
    if x.ndim == 1:
        grad_w = np.outer(gz, x)
        grad_b = gz.copy()
    else:
        grad_w = gz.T @ x
        grad_b = gz.sum(axis=0)
    grad_x = gz @ layer.weight
    return grad_w, grad_b, grad_x


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps)


def adam_update(param, grad, state: AdamState, lr: float, name: str = "param"):
    """One bias-corrected Adam step. Returns ``(new_param, new_state)``.

    An all-zero gradient is treated as "no update": parameter and state are
    returned unchanged. This keeps groups that received no signal in a step
    exactly where they were.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ShapeError(
            f"{name}: param {param.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    if lr <= 0:
        raise ValueError(f"{name}: learning rate must be positive, got {lr}")
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient in parameter group {name!r}")
    if not np.any(grad):
        return param.copy(), state
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new_param = param - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_param, AdamState(m, v, t, b1, b2, state.eps)


@dataclass(frozen=True)
class CosineSchedule:
    lr0: float
    T: int
    alpha: float = 0.5

    def __post_init__(self):
        if self.lr0 <= 0 or self.T <= 0 or not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"invalid cosine schedule {self}")


def cosine_lr(sched: CosineSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("step must be non-negative")
    frac = min(t, sched.T) / sched.T
    decay = 0.5 * (1.0 + math.cos(math.pi * frac))
    return sched.lr0 * ((1.0 - sched.alpha) * decay + sched.alpha)


@dataclass
class ParamGroup:
    """Named list of arrays updated together by one AdamState."""

    name: str
    arrays: list = field(default_factory=list)

    def flat(self) -> np.ndarray:
        if not self.arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self.arrays])

    def size(self) -> int:
        return sum(a.size for a in self.arrays)

    def assign(self, flat: np.ndarray) -> None:
        pos = 0
        for a in self.arrays:
            a[...] = flat[pos : pos + a.size].reshape(a.shape)
            pos += a.size
