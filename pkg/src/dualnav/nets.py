"""Minimal trainable-network kernel: dense nets, embeddings, losses, Adam.

Everything is double-precision numpy with handwritten reverse-mode
gradients, verified against central finite differences (grad_check).
Training code elsewhere in the package builds on these primitives.
"""

from __future__ import annotations

import math

import numpy as np

from .seeds import substream


class DivergenceError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)


class DenseNet:
    """Chain of affine layers with tanh between them; the last is affine only."""

    def __init__(self, sizes: list[int], seed: int = 0, name: str = "net"):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        rng = substream(seed, f"init/{name}")
        self.sizes = list(sizes)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.weights.append(uniform_init(rng, (fan_out, fan_in), fan_in))
            self.biases.append(uniform_init(rng, (fan_out,), fan_in))

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Returns the output and a cache sufficient for backward.

        Accepts a single vector or a batch of row vectors.
        """
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input size {x.shape[-1]} != expected {self.sizes[0]}")
        cache = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            if i < last:
                a = np.tanh(z)
            else:
                a = z
            cache.append((h, a if i < last else None))
            h = a
        return h, cache

    def backward(self, cache: list, dout: np.ndarray,
                 prefix: str = "") -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Exact reverse-mode gradients; returns (param grads, input grad)."""
        if len(cache) != len(self.weights):
            raise ValueError("stale or mismatched forward cache")
        grads: dict[str, np.ndarray] = {}
        d = np.asarray(dout, dtype=float)
        for i in reversed(range(len(self.weights))):
            h, act = cache[i]
            if act is not None:  # tanh layer: d wrt pre-activation
                d = d * (1.0 - act * act)
            if d.ndim == 1:
                grads[f"{prefix}W{i}"] = np.outer(d, h)
                grads[f"{prefix}b{i}"] = d.copy()
            else:
                grads[f"{prefix}W{i}"] = d.T @ h
                grads[f"{prefix}b{i}"] = d.sum(axis=0)
            d = d @ self.weights[i]
        return grads, d

    def set_params(self, params: dict[str, np.ndarray], prefix: str = "") -> None:
        for i in range(len(self.weights)):
            self.weights[i] = np.asarray(params[f"{prefix}W{i}"], dtype=float)
            self.biases[i] = np.asarray(params[f"{prefix}b{i}"], dtype=float)


class Embedding:
    """Token-id -> vector table with scatter-add gradients."""

    def __init__(self, vocab: int, dim: int, seed: int = 0, name: str = "emb"):
        rng = substream(seed, f"init/{name}")
        self.table = uniform_init(rng, (vocab, dim), dim)

    def lookup(self, ids: list[int]) -> np.ndarray:
        return self.table[np.asarray(ids, dtype=int)]

    def mean(self, ids: list[int]) -> np.ndarray:
        if len(ids) == 0:
            return np.zeros(self.table.shape[1])
        return self.table[np.asarray(ids, dtype=int)].mean(axis=0)

    def grad_mean(self, ids: list[int], dout: np.ndarray) -> np.ndarray:
        g = np.zeros_like(self.table)
        if len(ids):
            np.add.at(g, np.asarray(ids, dtype=int), dout / len(ids))
        return g


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against an index or a distribution.

    Returns (loss, gradient wrt logits); numerically stabilized by
    max-subtraction.
    """
    logits = np.asarray(logits, dtype=float)
    if logits.size == 0:
        raise ValueError("empty logits")
    p = softmax(logits)
    if np.isscalar(target) or isinstance(target, (int, np.integer)):
        t = int(target)
        z = logits - np.max(logits)
        loss = float(np.log(np.exp(z).sum()) - z[t])
        grad = p.copy()
        grad[t] -= 1.0
    else:
        q = np.asarray(target, dtype=float)
        z = logits - np.max(logits)
        logp = z - np.log(np.exp(z).sum())
        loss = float(-(q * logp).sum())
        grad = p - q
    return loss, grad


class Adam:
    """Adaptive-moment optimizer over a named parameter dict."""

    def __init__(self, lr: float = 3e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for k, g in sorted(grads.items()):
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for {k}")
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mhat = self.m[k] / (1 - self.beta1 ** self.t)
            vhat = self.v[k] / (1 - self.beta2 ** self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def grad_check(loss_and_grads, params: dict[str, np.ndarray],
               eps: float = 1e-5) -> float:
    """Worst relative error of analytic vs central-difference gradients.

    loss_and_grads(params) must return (scalar loss, grads dict) and be
    deterministic in params.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("eps out of the supported range")
    _, grads = loss_and_grads(params)
    worst = 0.0
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + eps
            lp, _ = loss_and_grads(params)
            p[idx] = orig - eps
            lm, _ = loss_and_grads(params)
            p[idx] = orig
            num = (lp - lm) / (2 * eps)
            ana = g[idx]
            denom = max(abs(num), abs(ana), 1e-8)
            worst = max(worst, abs(num - ana) / denom)
            it.iternext()
    return worst
