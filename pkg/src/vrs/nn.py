"""Small dense networks with hand-written backprop (numpy only)."""

from __future__ import annotations

import numpy as np

_ACT = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "linear": (lambda z: z, lambda z, a: np.ones_like(z)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(z.dtype)),
}


class MLP:
    """Fully connected stack ``sizes[0] -> ... -> sizes[-1]``.

    ``activations`` has one entry per layer; the default is tanh on hidden
    layers and linear on the output.
    """

    def __init__(self, sizes, activations=None, rng=None, init_scale: float = 1.0):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if activations is None:
            activations = ["tanh"] * (len(sizes) - 2) + ["linear"]
        if len(activations) != len(sizes) - 1:
            raise ValueError("one activation per layer")
        self.sizes = sizes
        self.activations = list(activations)
        rng = np.random.default_rng(rng)
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            # Glorot-normal
            std = init_scale * np.sqrt(2.0 / (n_in + n_out))
            self.weights.append(rng.normal(0.0, std, size=(n_in, n_out)))
            self.biases.append(np.zeros(n_out))

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def forward(self, X, return_cache: bool = False):
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.n_in:
            raise ValueError(f"expected {self.n_in} input features, got {X.shape[-1]}")
        cache = [X]
        a = X
        for W, b, act in zip(self.weights, self.biases, self.activations):
            z = a @ W + b
            a = _ACT[act][0](z)
            cache.append((z, a))
        return (a, cache) if return_cache else a

    __call__ = forward

    def backward(self, cache, d_out):
        """Gradients of a scalar loss given dL/d(output). Returns
        (weight grads, bias grads, dL/d(input))."""
        gW = [None] * len(self.weights)
        gb = [None] * len(self.biases)
        delta = d_out
        for i in reversed(range(len(self.weights))):
            z, a = cache[i + 1]
            delta = delta * _ACT[self.activations[i]][1](z, a)
            prev = cache[i] if i == 0 else cache[i][1]
            gW[i] = prev.T @ delta
            gb[i] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
        return gW, gb, delta

    # flat parameter views, used by finite-difference checks and checkpoints
    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    def set_flat(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        i = 0
        for k in range(len(self.weights)):
            for arr in (self.weights[k], self.biases[k]):
                n = arr.size
                arr[...] = theta[i:i + n].reshape(arr.shape)
                i += n
        if i != theta.size:
            raise ValueError("parameter vector has the wrong length")

    @staticmethod
    def flatten_grads(gW, gb) -> np.ndarray:
        return np.concatenate([g.ravel() for pair in zip(gW, gb) for g in pair])

    def step(self, gW, gb, lr: float) -> None:
        for W, b, dW, db in zip(self.weights, self.biases, gW, gb):
            W -= lr * dW
            b -= lr * db

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "activations": self.activations,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        net = cls(d["sizes"], d["activations"], rng=0)
        net.weights = [np.asarray(W, dtype=float) for W in d["weights"]]
        net.biases = [np.asarray(b, dtype=float) for b in d["biases"]]
        return net

    def copy(self) -> "MLP":
        return MLP.from_dict(self.to_dict())


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relative_error(a, b, floor: float = 1e-8) -> float:
    """Max elementwise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def central_difference(loss_fn, theta, eps: float = 1e-6) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).copy()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + eps
        up = loss_fn(theta)
        theta[i] = old - eps
        down = loss_fn(theta)
        theta[i] = old
        grad[i] = (up - down) / (2 * eps)
    return grad
