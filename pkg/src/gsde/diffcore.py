"""Dense forward/backward primitives used to train the network by hand.

Matrices are plain ``float64`` numpy arrays. Every layer keeps its own
gradient buffers; backward functions *accumulate* into them so that several
loss terms can contribute before a single :func:`sgd_step`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes do not line up."""


def make_rng(*seed_parts: int) -> np.random.Generator:
    """PCG64 generator keyed by one or more integers.

    ``make_rng(seed, run, 3)`` and ``make_rng(seed, run, 4)`` give independent
    streams, which is how sub-seeds are derived everywhere in the package.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(seed_parts))))


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


@dataclass
class LinearLayer:
    """Affine map ``y = x @ W.T + b`` with gradient buffers."""

    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    grad_weight: np.ndarray = field(init=False)
    grad_bias: np.ndarray = field(init=False)

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError(
                f"weight {self.weight.shape} and bias {self.bias.shape} are inconsistent"
            )
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @classmethod
    def init_uniform(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "LinearLayer":
        """Fan-in uniform init, bound ``1/sqrt(in_dim)`` for weight and bias."""
        if in_dim <= 0 or out_dim <= 0:
            raise ValueError(f"layer dimensions must be positive, got {in_dim}->{out_dim}")
        bound = 1.0 / np.sqrt(in_dim)
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        b = rng.uniform(-bound, bound, size=out_dim)
        return cls(w, b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def zero_grad(self) -> None:
        self.grad_weight.fill(0.0)
        self.grad_bias.fill(0.0)

    def params(self):
        return [(self.weight, self.grad_weight), (self.bias, self.grad_bias)]

    def copy(self) -> "LinearLayer":
        return LinearLayer(self.weight.copy(), self.bias.copy())


def linear_forward(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match layer input dim {layer.in_dim}")
    return x @ layer.weight.T + layer.bias


def linear_backward(layer: LinearLayer, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients and return d(loss)/d(x)."""
    if upstream.ndim != 2 or upstream.shape != (x.shape[0], layer.out_dim):
        raise ShapeError(
            f"upstream shape {upstream.shape} does not match forward output "
            f"({x.shape[0]}, {layer.out_dim})"
        )
    layer.grad_weight += upstream.T @ x
    layer.grad_bias += upstream.sum(axis=0)
    return upstream @ layer.weight


def relu_forward(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_backward(z: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # z is the pre-activation; subgradient 0 at z == 0
    return upstream * (z > 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax: gradient w.r.t. the logits."""
    inner = np.sum(grad_probs * probs, axis=1, keepdims=True)
    return probs * (grad_probs - inner)


def cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    """Mean over rows of ``-sum(y * log p)``; targets may be soft."""
    if probs.shape != onehot.shape:
        raise ShapeError(f"probs {probs.shape} vs targets {onehot.shape}")
    if probs.shape[0] == 0:
        return 0.0
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("cross_entropy expects probability rows summing to 1")
    logp = np.log(np.maximum(probs, PROB_FLOOR))
    return float(-np.sum(onehot * logp) / probs.shape[0])


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce(prob, label) -> float:
    """Mean binary cross-entropy with the probability clamped into [1e-12, 1-1e-12]."""
    p = np.clip(np.asarray(prob, dtype=np.float64), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = np.asarray(label, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def sgd_step(params: Iterable[tuple[np.ndarray, np.ndarray]], learning_rate: float,
             weight_decay: float = 0.0) -> None:
    """In-place ``p -= lr * (grad + wd * p)``; gradient buffers are left alone."""
    if learning_rate <= 0:
        raise ValueError(f"learning_rate must be positive, got {learning_rate}")
    for p, g in params:
        if weight_decay:
            p -= learning_rate * (g + weight_decay * p)
        else:
            p -= learning_rate * g
