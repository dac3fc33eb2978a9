"""Minimal float64 feedforward networks with explicit backpropagation.

Kept deliberately small: dense layers, SiLU activations, and two
optimisers. Parameters are plain arrays so they can be checkpointed in
declaration order and gradient-checked against finite differences.
"""

from __future__ import annotations

import math

import numpy as np


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form does not overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    sig = _sigmoid(x)
    return sig * (1.0 + x * (1.0 - sig))


class MLP:
    """Dense network ``sizes[0] -> ... -> sizes[-1]`` with SiLU between layers.

    The output layer is linear. Weights use a scaled normal init.
    """

    def __init__(self, sizes: list[int], rng: np.random.Generator, out_scale: float = 1.0):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = list(sizes)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = math.sqrt(2.0 / n_in)
            if i == len(sizes) - 2:
                scale *= out_scale
            self.weights.append(rng.standard_normal((n_in, n_out)) * scale)
            self.biases.append(np.zeros(n_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        cache = []
        h = x
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = h @ w + b
            cache.append((h, pre))
            h = silu(pre) if i < n - 1 else pre
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: list, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Return gradients aligned with ``params`` and the gradient w.r.t. the input."""
        grads: list[np.ndarray] = []
        g = grad_out
        n = len(self.weights)
        for i in range(n - 1, -1, -1):
            h, pre = cache[i]
            if i < n - 1:
                g = g * silu_grad(pre)
            grads.append(g.sum(axis=0))
            grads.append(h.T @ g)
            g = g @ self.weights[i].T
        grads.reverse()
        return grads, g

    def n_params(self) -> int:
        return sum(p.size for p in self.params)


class Adam:
    def __init__(self, lr: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None
        self.k = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.k += 1
        c1 = 1.0 - self.beta1 ** self.k
        c2 = 1.0 - self.beta2 ** self.k
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr: float = 1e-2):
        self.lr = lr

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {name!r}")


def sinusoidal_features(t_frac: np.ndarray, dim: int) -> np.ndarray:
    """Sin/cos features of a fractional timestep in ``[0, 1]``; ``dim`` must be even."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    t_frac = np.atleast_1d(np.asarray(t_frac, dtype=np.float64))
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), dim // 2))
    ang = t_frac[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
