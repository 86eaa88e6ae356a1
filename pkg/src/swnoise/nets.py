"""Drift networks for the bridge chains: a residual two-hidden-layer MLP on
the flattened field with a fixed sinusoidal step-index embedding added to the
first hidden layer.  Written directly in numpy (float64) with hand-derived
backprop so checkpoints are exact parameter blobs and gradients can be
checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PARAM_KEYS = ("w1", "b1", "w2", "b2", "w3", "b3")


def _silu(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s


def _silu_grad(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def sinusoidal_embedding(n_steps: int, width: int) -> np.ndarray:
    """(n_steps+1, width) table of sin/cos features of the step index."""
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    k = np.arange(n_steps + 1)[:, None]
    table = np.zeros((n_steps + 1, width))
    table[:, :half] = np.sin(k * freqs[None, :])
    table[:, half: 2 * half] = np.cos(k * freqs[None, :])
    return table


@dataclass
class DriftNet:
    """Trainable map (step index k, x in R^d) -> R^d.

    The output layer is zero-initialised, so a fresh net is exactly the zero
    drift (the reference chain of the first bridge iteration).
    """

    d: int
    hidden: int
    n_steps: int
    seed: int = 0
    params: dict = field(default=None)

    def __post_init__(self):
        if self.params is None:
            rng = np.random.default_rng(self.seed)
            self.params = {
                "w1": rng.standard_normal((self.hidden, self.d)) / np.sqrt(self.d),
                "b1": np.zeros(self.hidden),
                "w2": rng.standard_normal((self.hidden, self.hidden))
                / np.sqrt(self.hidden),
                "b2": np.zeros(self.hidden),
                "w3": np.zeros((self.d, self.hidden)),
                "b3": np.zeros(self.d),
            }
        self._emb = sinusoidal_embedding(self.n_steps, self.hidden)

    def __call__(self, k, x: np.ndarray) -> np.ndarray:
        return self.forward(k, x)[0]

    def forward(self, k, x: np.ndarray):
        """Returns (output, cache) with the intermediates needed by backward."""
        x = np.atleast_2d(x)
        k = np.broadcast_to(np.asarray(k, dtype=int), (x.shape[0],))
        p = self.params
        a1 = x @ p["w1"].T + p["b1"] + self._emb[k]
        h1 = _silu(a1)
        a2 = h1 @ p["w2"].T + p["b2"]
        h2 = h1 + _silu(a2)
        out = h2 @ p["w3"].T + p["b3"]
        return out, (x, a1, h1, a2, h2)

    def backward(self, cache, dout: np.ndarray) -> dict:
        """Parameter gradients of sum(dout * output)."""
        x, a1, h1, a2, h2 = cache
        p = self.params
        grads = {}
        grads["w3"] = dout.T @ h2
        grads["b3"] = dout.sum(axis=0)
        dh2 = dout @ p["w3"]
        da2 = dh2 * _silu_grad(a2)
        grads["w2"] = da2.T @ h1
        grads["b2"] = da2.sum(axis=0)
        dh1 = dh2 + da2 @ p["w2"]
        da1 = dh1 * _silu_grad(a1)
        grads["w1"] = da1.T @ x
        grads["b1"] = da1.sum(axis=0)
        return grads

    def pack(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_KEYS])

    def unpack(self, flat: np.ndarray) -> None:
        offset = 0
        for key in PARAM_KEYS:
            shape = self.params[key].shape
            n = int(np.prod(shape))
            self.params[key] = flat[offset: offset + n].reshape(shape).copy()
            offset += n
        if offset != flat.size:
            raise ValueError(f"parameter blob has {flat.size} values, expected {offset}")

    def copy(self) -> "DriftNet":
        dup = DriftNet(self.d, self.hidden, self.n_steps, self.seed,
                       {k: v.copy() for k, v in self.params.items()})
        return dup

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


class Adam:
    """Adaptive moment estimation on a DriftNet's parameter dict."""

    def __init__(self, net: DriftNet, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.net = net
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in net.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in net.params.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for key, g in grads.items():
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * g * g
            mhat = self.m[key] / b1c
            vhat = self.v[key] / b2c
            self.net.params[key] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
