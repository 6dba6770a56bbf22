"""Layers, distributions and the Adam optimizer used by every model.

Weights initialize to uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) and biases to
zero; weight decay is decoupled (applied straight to the parameters, not
through the gradient).
"""
from __future__ import annotations

import numpy as np

from .autodiff import (NonFiniteError, ShapeError, Tensor, as_tensor, concat,
                       exp, matmul, relu, sigmoid, softplus, tanh, tensor_sum,
                       transpose)


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape: tuple) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Affine map W x + b for a single vector or a (batch, n) matrix."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    m, n = W.shape
    if x.shape[-1] != n or b.shape != (m,):
        raise ShapeError(
            f"linear: x{x.shape} incompatible with W{W.shape}, b{b.shape}")
    if x.ndim == 1:
        return matmul(W, x) + b
    return matmul(x, transpose(W)) + b


class Linear:
    """Single affine layer with W of shape (out_dim, in_dim)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.W = uniform_init(rng, (out_dim, in_dim), in_dim)
        self.b = zeros_param((out_dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.W, self.b)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}W": self.W, f"{prefix}b": self.b}


_ACTIVATIONS = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid,
                "softplus": softplus, None: None}


class MLP:
    """Fully connected net: each hidden layer is Linear followed by the
    hidden activation; the output layer is Linear plus an optional output
    activation."""

    def __init__(self, sizes: list[int], rng: np.random.Generator,
                 activation: str = "tanh", out_activation: str | None = None):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.layers = [Linear(sizes[i], sizes[i + 1], rng)
                       for i in range(len(sizes) - 1)]
        self.activation = _ACTIVATIONS[activation]
        self.out_activation = _ACTIVATIONS[out_activation]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.layers[:-1]:
            h = self.activation(layer(h))
        h = self.layers[-1](h)
        if self.out_activation is not None:
            h = self.out_activation(h)
        return h

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            params.update(layer.parameters(f"{prefix}l{i}."))
        return params


class GruCell:
    """Gated recurrent unit with update/reset gates and tanh candidate.

    Convention: h' = (1 - z) * n + z * h, so a saturated update gate keeps
    the previous hidden state. One bias per gate; the candidate bias sits
    outside the reset product: n = tanh(Wx x + r * (Wh h) + b).
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        fan = input_dim + hidden_dim
        self.update_Wx = uniform_init(rng, (hidden_dim, input_dim), fan)
        self.update_Wh = uniform_init(rng, (hidden_dim, hidden_dim), fan)
        self.update_b = zeros_param((hidden_dim,))
        self.reset_Wx = uniform_init(rng, (hidden_dim, input_dim), fan)
        self.reset_Wh = uniform_init(rng, (hidden_dim, hidden_dim), fan)
        self.reset_b = zeros_param((hidden_dim,))
        self.cand_Wx = uniform_init(rng, (hidden_dim, input_dim), fan)
        self.cand_Wh = uniform_init(rng, (hidden_dim, hidden_dim), fan)
        self.cand_b = zeros_param((hidden_dim,))

    def __call__(self, h_prev: Tensor, x: Tensor) -> Tensor:
        if x.shape[-1] != self.input_dim or h_prev.shape[-1] != self.hidden_dim:
            raise ShapeError(
                f"gru_cell: x{x.shape}, h{h_prev.shape} incompatible with "
                f"(input_dim={self.input_dim}, hidden_dim={self.hidden_dim})")
        z = sigmoid(linear(x, self.update_Wx, self.update_b)
                    + _matvec(h_prev, self.update_Wh))
        r = sigmoid(linear(x, self.reset_Wx, self.reset_b)
                    + _matvec(h_prev, self.reset_Wh))
        n = tanh(linear(x, self.cand_Wx, self.cand_b)
                 + r * _matvec(h_prev, self.cand_Wh))
        return (1.0 - z) * n + z * h_prev

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}{name}": getattr(self, name)
                for name in ("update_Wx", "update_Wh", "update_b",
                             "reset_Wx", "reset_Wh", "reset_b",
                             "cand_Wx", "cand_Wh", "cand_b")}


def _matvec(h: Tensor, W: Tensor) -> Tensor:
    if h.ndim == 1:
        return matmul(W, h)
    return matmul(h, transpose(W))


def gru_cell(h_prev: Tensor, x: Tensor, cell: GruCell) -> Tensor:
    return cell(h_prev, x)


def gaussian_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) = 0.5 sum(mu^2 + e^lv - 1 - lv)."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"gaussian_kl: mu{mu.shape} vs logvar{logvar.shape}")
    if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(logvar.data))):
        raise NonFiniteError("gaussian_kl: non-finite inputs")
    return 0.5 * tensor_sum(mu * mu + exp(logvar) - 1.0 - logvar)


def reparameterize(mu: Tensor, logvar: Tensor, noise: np.ndarray) -> Tensor:
    """mu + exp(logvar/2) * noise; the noise is a constant standard-normal
    draw, so gradients flow to mu and logvar only."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"reparameterize: mu{mu.shape} vs logvar{logvar.shape}")
    return mu + exp(0.5 * logvar) * Tensor(noise)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(np.max(logits.data, axis=axis, keepdims=True))
    shifted = logits - shift
    from .autodiff import log as _log
    return shifted - _log(tensor_sum(exp(shifted), axis=axis, keepdims=True))


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(logits, axis=axis))


class Adam:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], learning_rate: float,
                 weight_decay: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = dict(params)
        self.learning_rate = float(learning_rate)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NonFiniteError(f"adam_step: non-finite gradient for '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data -= self.learning_rate * self.weight_decay * p.data
            p.data -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)

    def state_dict(self) -> dict:
        return {"step_count": self.step_count,
                "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for k in self.m:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]


def adam_step(optimizer: Adam) -> None:
    """One optimizer step; kept as a free function for symmetry with tests."""
    optimizer.step()


def clone_parameters(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def load_parameters(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.data[...] = arrays[k]
