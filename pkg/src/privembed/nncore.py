"""Dense neural-network core: layers, activations, losses, and Adam.

All arithmetic is float64 and every layer is hand-differentiated: the
forward pass caches exactly what its backward pass needs. Parameter
gradients accumulate additively until ``zero_grad`` is called, so one
optimizer step must be paired with one zeroing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBatchError, DegenerateInputError, ShapeError

# Probabilities are clamped to [PROB_CLAMP, 1 - PROB_CLAMP] before any
# logarithm; keeps losses finite without measurably biasing gradients.
PROB_CLAMP = 1e-7


def as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {x.shape}")
    return x


def glorot_uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    """Symmetric uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


class LinearLayer:
    """Affine map ``y = x @ W.T + b`` with accumulated parameter gradients."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.weight = glorot_uniform(rng, self.out_dim, self.in_dim)
        self.bias = np.zeros(self.out_dim)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._input: np.ndarray | None = None

    def forward(self, x) -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.in_dim:
            raise ShapeError(
                f"linear layer expects {self.in_dim} input columns, got {x.shape[1]}"
            )
        self._input = x
        return x @ self.weight.T + self.bias

    def backward(self, grad_out) -> np.ndarray:
        if self._input is None:
            raise ShapeError("backward called before forward")
        grad_out = as_matrix(grad_out)
        if grad_out.shape != (self._input.shape[0], self.out_dim):
            raise ShapeError(
                f"grad shape {grad_out.shape} does not match forward output "
                f"({self._input.shape[0]}, {self.out_dim})"
            )
        self.grad_weight += grad_out.T @ self._input
        self.grad_bias += grad_out.sum(axis=0)
        return grad_out @ self.weight

    def zero_grad(self) -> None:
        self.grad_weight[:] = 0.0
        self.grad_bias[:] = 0.0

    def parameters(self):
        return [(self.weight, self.grad_weight), (self.bias, self.grad_bias)]


class ReLU:
    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out) -> np.ndarray:
        return np.asarray(grad_out, dtype=np.float64) * self._mask


class Tanh:
    def forward(self, x) -> np.ndarray:
        self._out = np.tanh(np.asarray(x, dtype=np.float64))
        return self._out

    def backward(self, grad_out) -> np.ndarray:
        return np.asarray(grad_out, dtype=np.float64) * (1.0 - self._out**2)


class Sigmoid:
    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._out = out
        return out

    def backward(self, grad_out) -> np.ndarray:
        return np.asarray(grad_out, dtype=np.float64) * self._out * (1.0 - self._out)


ACTIVATIONS = {"relu": ReLU, "tanh": Tanh, "sigmoid": Sigmoid}


def make_activation(kind: str):
    try:
        return ACTIVATIONS[kind]()
    except KeyError:
        raise ShapeError(f"unknown activation kind {kind!r}") from None


class BatchNormLayer:
    """Per-feature batch normalization with learnable scale and shift.

    Train mode normalizes by batch statistics and updates the running
    statistics with an exponential moving average
    ``running <- (1 - momentum) * running + momentum * batch``.
    Eval mode depends only on the running statistics.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.dim = int(dim)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.gamma = np.ones(self.dim)
        self.beta = np.zeros(self.dim)
        self.running_mean = np.zeros(self.dim)
        self.running_var = np.ones(self.dim)
        self.grad_gamma = np.zeros(self.dim)
        self.grad_beta = np.zeros(self.dim)
        self.mode = "train"
        self._cache = None

    def forward(self, x) -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.dim:
            raise ShapeError(f"batch norm expects {self.dim} columns, got {x.shape[1]}")
        if self.mode == "train":
            n = x.shape[0]
            if n < 2:
                raise DegenerateBatchError(
                    "batch norm in train mode needs a batch of at least 2"
                )
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean = (1.0 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1.0 - self.momentum) * self.running_var + self.momentum * var
            inv_std = 1.0 / np.sqrt(var + self.eps)
            x_hat = (x - mean) * inv_std
            self._cache = ("train", x_hat, inv_std, n)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            x_hat = (x - self.running_mean) * inv_std
            self._cache = ("eval", x_hat, inv_std, x.shape[0])
        return self.gamma * x_hat + self.beta

    def backward(self, grad_out) -> np.ndarray:
        if self._cache is None:
            raise ShapeError("backward called before forward")
        mode, x_hat, inv_std, n = self._cache
        grad_out = as_matrix(grad_out)
        if grad_out.shape != x_hat.shape:
            raise ShapeError(
                f"grad shape {grad_out.shape} does not match forward output {x_hat.shape}"
            )
        self.grad_gamma += (grad_out * x_hat).sum(axis=0)
        self.grad_beta += grad_out.sum(axis=0)
        d_xhat = grad_out * self.gamma
        if mode == "eval":
            return d_xhat * inv_std
        return (inv_std / n) * (
            n * d_xhat - d_xhat.sum(axis=0) - x_hat * (d_xhat * x_hat).sum(axis=0)
        )

    def zero_grad(self) -> None:
        self.grad_gamma[:] = 0.0
        self.grad_beta[:] = 0.0

    def parameters(self):
        return [(self.gamma, self.grad_gamma), (self.beta, self.grad_beta)]


def bce_loss(p, y, flipped: bool = False):
    """Mean binary cross-entropy and its gradient with respect to ``p``.

    With ``flipped=False`` this scores ``p`` as the predicted probability of
    the positive class. With ``flipped=True`` the prediction is inverted,
    which is identical to scoring against ``1 - y``.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ShapeError(f"probability/label shapes differ: {p.shape} vs {y.shape}")
    if flipped:
        return bce_loss(p, 1.0 - y, flipped=False)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = p.size
    loss = float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))))
    grad = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n
    return loss, grad


def cosine_loss(x, x_hat):
    """Batch-averaged cosine distance and its gradient with respect to ``x_hat``.

    Returns ``mean_i(1 - cos(x_i, x_hat_i))``. Both inputs must be 2-D with
    matching shapes and strictly positive row norms.
    """
    x = as_matrix(x)
    x_hat = as_matrix(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"shapes differ: {x.shape} vs {x_hat.shape}")
    nx = np.linalg.norm(x, axis=1)
    nh = np.linalg.norm(x_hat, axis=1)
    if np.any(nx == 0.0) or np.any(nh == 0.0):
        raise DegenerateInputError("cosine distance is undefined for zero-norm rows")
    cos = (x * x_hat).sum(axis=1) / (nx * nh)
    loss = float(np.mean(1.0 - cos))
    n = x.shape[0]
    grad = -(x / (nx * nh)[:, None] - (cos / nh**2)[:, None] * x_hat) / n
    return loss, grad


@dataclass
class AdamState:
    """Optimizer state for one parameter tensor."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One Adam update with bias correction; ``params`` is updated in place."""
    if params.shape != grads.shape:
        raise ShapeError(f"param/grad shapes differ: {params.shape} vs {grads.shape}")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    elif state.m.shape != params.shape:
        raise ShapeError(f"state shaped {state.m.shape} cannot step params {params.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


class Adam:
    """Adam over a list of ``(param, grad)`` array pairs."""

    def __init__(self, param_grads, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self._pairs = list(param_grads)
        self._states = [
            AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps) for _ in self._pairs
        ]

    def step(self) -> None:
        for (param, grad), state in zip(self._pairs, self._states):
            adam_step(state, param, grad)
