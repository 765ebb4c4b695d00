"""Tiny dense tanh network with hand-written backprop and Adam.

Deliberately minimal: the lab only needs a smooth trainable map with a
checkable Lipschitz bound, not a learning framework.
"""
from __future__ import annotations

import json

import numpy as np

__all__ = ["MLP", "Adam", "spectral_norm", "power_iteration"]


def spectral_norm(W: np.ndarray) -> float:
    """Exact largest singular value."""
    if W.size == 0:
        return 0.0
    return float(np.linalg.norm(W, 2))


def power_iteration(W: np.ndarray, n_iter: int = 5, u: np.ndarray | None = None, seed: int = 0):
    """Power-iteration estimate of ``||W||_2`` (a lower bound); returns ``(sigma, u)``.

    Kept for diagnostics and warm-started estimates; certification uses
    :func:`spectral_norm`.
    """
    if u is None:
        u = np.random.default_rng(seed).standard_normal(W.shape[1])
    u = u / np.linalg.norm(u)
    for _ in range(n_iter):
        v = W @ u
        v /= np.linalg.norm(v) + 1e-300
        u = W.T @ v
        u /= np.linalg.norm(u) + 1e-300
    return float(v @ W @ u), u


class MLP:
    """``y = W_L tanh(... tanh(W_1 x + b_1) ...) + b_L``; weights stored as ``(out, in)``."""

    def __init__(self, layer_sizes, seed: int = 0, zero_last: bool = False):
        self.layer_sizes = [int(s) for s in layer_sizes]
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self.weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(1.0 / fan_in))
            self.biases.append(np.zeros(fan_out))
        if zero_last:
            self.weights[-1][:] = 0.0

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MLP":
        new = MLP.__new__(MLP)
        new.layer_sizes = list(self.layer_sizes)
        new.weights = [W.copy() for W in self.weights]
        new.biases = [b.copy() for b in self.biases]
        return new

    def forward(self, X: np.ndarray, keep: bool = False):
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        return (h, acts) if keep else h

    __call__ = forward

    def backward(self, acts, dY: np.ndarray):
        """Gradients of ``sum(dY * y)`` w.r.t. params, in :attr:`params` order."""
        grads = []
        g = dY
        for i in range(len(self.weights) - 1, -1, -1):
            grads.append(g.sum(0))  # bias
            grads.append(g.T @ acts[i])  # weight
            if i > 0:
                g = (g @ self.weights[i]) * (1.0 - acts[i] ** 2)
        return grads[::-1]

    def layer_norms(self, input_slice: slice | None = None) -> list[float]:
        """Spectral norm of each layer; ``input_slice`` restricts the first layer's columns."""
        norms = []
        for i, W in enumerate(self.weights):
            if i == 0 and input_slice is not None:
                W = W[:, input_slice]
            norms.append(spectral_norm(W))
        return norms

    # -- persistence ----------------------------------------------------
    def flat(self) -> list[float]:
        return [float(v) for p in self.params for v in p.ravel()]

    def to_dict(self) -> dict:
        return {"layer_sizes": self.layer_sizes, "params": self.flat()}

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        net = cls(d["layer_sizes"])
        flat = np.asarray(d["params"], dtype=float)
        pos = 0
        for p in net.params:
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size
        if pos != flat.size:
            raise ValueError(f"parameter count mismatch: expected {pos}, got {flat.size}")
        return net

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
