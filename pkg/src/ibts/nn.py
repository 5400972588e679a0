"""Small neural building blocks on top of :mod:`ibts.gradcore`."""
from __future__ import annotations

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor


class Module:
    """Parameter container; parameters are found by walking attributes in order."""

    def named_parameters(self, prefix=""):
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Param):
                out.append((prefix + name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix + name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]


class Param(Tensor):
    """Trainable tensor; stays discoverable by Module after freezing."""
    __slots__ = ()


def param(values):
    return Param(np.asarray(values, dtype=np.float64), requires_grad=True)


def glorot(rng, n_in, n_out):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return param(rng.uniform(-limit, limit, size=(n_in, n_out)))


class Linear(Module):
    def __init__(self, rng, n_in, n_out, bias=True):
        self.weight = glorot(rng, n_in, n_out)
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        y = gc.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = param(np.ones(dim))
        self.shift = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        mu = gc.mean(x, axis=-1, keepdims=True)
        xc = x - mu
        var = gc.mean(gc.square(xc), axis=-1, keepdims=True)
        return xc / gc.sqrt(var + self.eps) * self.gain + self.shift


class SelfAttention(Module):
    """Single-head scaled dot-product self-attention."""

    def __init__(self, rng, dim):
        self.query = Linear(rng, dim, dim)
        self.key = Linear(rng, dim, dim)
        self.value = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)
        self.scale = 1.0 / np.sqrt(dim)

    def __call__(self, h):
        q, k, v = self.query(h), self.key(h), self.value(h)
        scores = gc.matmul(q, gc.swapaxes(k)) * self.scale
        return self.out(gc.matmul(gc.softmax(scores), v))


def dropout(x, rate, rng):
    if not rate or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


class TransformerBlock(Module):
    """Pre-norm block: h + attn(ln(h)), then h + ffn(ln(h))."""

    def __init__(self, rng, dim, ffn_dim, dropout=0.0):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(rng, dim)
        self.norm2 = LayerNorm(dim)
        self.ffn_in = Linear(rng, dim, ffn_dim)
        self.ffn_out = Linear(rng, ffn_dim, dim)
        self.dropout = dropout

    def __call__(self, h, rng=None):
        h = h + dropout(self.attn(self.norm1(h)), self.dropout, rng)
        z = self.ffn_out(gc.relu(self.ffn_in(self.norm2(h))))
        return h + dropout(z, self.dropout, rng)


class GRU(Module):
    def __init__(self, rng, n_in, dim):
        self.gates_x = Linear(rng, n_in, 3 * dim)
        self.gates_h = Linear(rng, dim, 3 * dim, bias=False)
        self.dim = dim

    def __call__(self, x):
        """x: (B, T, n_in) -> hidden states (B, T, dim)."""
        B, T, _ = x.shape
        d = self.dim
        gx = self.gates_x(x)
        h = Tensor(np.zeros((B, d)))
        states = []
        for t in range(T):
            gxt = gx[:, t, :]
            gh = self.gates_h(h)
            z = gc.sigmoid(gxt[:, :d] + gh[:, :d])
            r = gc.sigmoid(gxt[:, d:2 * d] + gh[:, d:2 * d])
            n = gc.tanh(gxt[:, 2 * d:] + r * gh[:, 2 * d:])
            h = (1.0 - z) * n + z * h
            states.append(gc.reshape(h, (B, 1, d)))
        return gc.concat(states, axis=1)


def local_window(x, width):
    """Stack each time step with its neighbours: (B, T, D) -> (B, T, D*width).

    Out-of-range neighbours are zero. Built from slicing and concatenation so
    gradients reach ``x``.
    """
    if width <= 1:
        return x
    B, T, D = x.shape
    half = width // 2
    pad = Tensor(np.zeros((B, half, D)))
    padded = gc.concat([pad, x, pad], axis=1)
    return gc.concat([padded[:, i:i + T, :] for i in range(width)], axis=-1)
