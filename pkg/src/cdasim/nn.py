"""Small tanh MLPs with hand-written backprop, float64 throughout."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


class DimensionMismatch(ValueError):
    pass


def n_params(sizes: Sequence[int]) -> int:
    return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))


class Mlp:
    """Fully connected net: tanh on hidden layers, linear output.

    All weights and biases live in one flat ``params`` array; ``layers`` holds
    ``(W, b)`` views into it, with ``W`` shaped ``(n_in, n_out)``.
    """

    def __init__(self, sizes: Sequence[int], params: Optional[np.ndarray] = None,
                 rng: Optional[np.random.Generator] = None, out_scale: float = 1.0):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        n = n_params(self.sizes)
        if params is None:
            params = np.zeros(n)
            if rng is not None:
                self._bind(params)
                last = len(self.layers) - 1
                for i, (W, _) in enumerate(self.layers):
                    scale = np.sqrt(1.0 / W.shape[0])
                    if i == last:
                        scale *= out_scale
                    W[...] = rng.normal(0.0, scale, W.shape)
        else:
            params = np.ascontiguousarray(params, dtype=np.float64)
            if params.shape != (n,):
                raise DimensionMismatch(f"expected {n} parameters, got {params.shape}")
        self._bind(params)

    def _bind(self, params: np.ndarray) -> None:
        self.params = params
        self.layers = []
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            W = params[off:off + a * b].reshape(a, b)
            off += a * b
            bias = params[off:off + b]
            off += b
            self.layers.append((W, bias))

    def set_params(self, params: np.ndarray) -> None:
        self.params[...] = params

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, self.params.copy())

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise DimensionMismatch(f"input has {x.shape[-1]} features, net expects {self.n_in}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self._check(x)
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            h = h @ W + b
            if i < last:
                h = np.tanh(h)
        return h

    __call__ = forward

    def forward_cache(self, x: np.ndarray):
        """Batched forward that keeps the activations needed by :meth:`backward`."""
        h = self._check(x)
        if h.ndim == 1:
            h = h[None, :]
        acts = [h]
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            h = h @ W + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, acts, dout: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(dout * out)`` with respect to the flat parameters."""
        grad = np.empty_like(self.params)
        d = np.asarray(dout, dtype=np.float64)
        if d.ndim == 1:
            d = d[None, :]
        offs = []
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            offs.append(off)
            off += (a + 1) * b
        for i in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[i]
            a_in = acts[i]
            o = offs[i]
            n_w = W.size
            grad[o:o + n_w] = (a_in.T @ d).ravel()
            grad[o + n_w:o + n_w + W.shape[1]] = d.sum(axis=0)
            if i > 0:
                d = (d @ W.T) * (1.0 - a_in * a_in)
        return grad
