"""Differentiable building blocks with hand-written backward passes.

Every module caches what its backward needs during ``forward`` and consumes
it in ``backward(dy)``, which accumulates parameter gradients into
``Param.grad`` and returns the gradient w.r.t. the input. A module therefore
supports one outstanding forward at a time. Inputs carry arbitrary leading
batch axes; the last axis is the feature axis and, where it matters, the
second to last is the token axis.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import NumericalFailure, ShapeError


class Param:
    """A named array with a gradient buffer and a trainable flag."""

    __slots__ = ("value", "grad", "trainable")

    def __init__(self, value, trainable: bool = True):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Param(shape={self.value.shape}, trainable={self.trainable})"


class Module:
    """Base class: parameter registry, traversal and freezing.

    Parameters live in ``self.params`` (insertion-ordered); child modules are
    any attributes that are :class:`Module` instances, or lists or dicts of
    them.
    """

    def __init__(self):
        self.params: dict[str, Param] = {}

    def children(self):
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)) and v and all(isinstance(m, Module) for m in v):
                for i, m in enumerate(v):
                    yield f"{name}.{i}", m
            elif isinstance(v, dict) and v and all(isinstance(m, Module) for m in v.values()):
                for k, m in v.items():
                    yield f"{name}.{k}", m

    def named_params(self, prefix: str = ""):
        for k, p in self.params.items():
            yield prefix + k, p
        for name, child in self.children():
            yield from child.named_params(f"{prefix}{name}.")

    def param_dict(self) -> dict[str, Param]:
        return dict(self.named_params())

    def zero_grad(self):
        for _, p in self.named_params():
            p.grad[...] = 0.0

    def set_trainable(self, flag: bool):
        for _, p in self.named_params():
            p.trainable = flag
        return self

    def freeze(self):
        return self.set_trainable(False)

    def n_params(self, trainable_only: bool = False) -> int:
        return sum(p.value.size for _, p in self.named_params() if p.trainable or not trainable_only)

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)


def xavier(rng, d_out, d_in):
    a = math.sqrt(6.0 / (d_in + d_out))
    return rng.gen.uniform(-a, a, size=(d_out, d_in))


def check_finite(x, where: str):
    # one reduction: any NaN or inf makes the sum non-finite
    if not np.isfinite(np.sum(x)):
        raise NumericalFailure(f"non-finite activations in {where}")
    return x


class Linear(Module):
    """``y = x W^T + b`` with ``W`` stored as (d_out, d_in)."""

    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.params["W"] = Param(xavier(rng, d_out, d_in))
        if bias:
            self.params["b"] = Param(np.zeros(d_out))

    def weight(self) -> np.ndarray:
        return self.params["W"].value

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects last dim {self.d_in}, got {x.shape[-1]}")
        self._x = x
        y = x @ self.weight().T
        if "b" in self.params:
            y = y + self.params["b"].value
        return check_finite(y, "Linear")

    def backward(self, dy):
        x = self._x
        W = self.params["W"]
        if W.trainable:
            W.grad += dy.reshape(-1, self.d_out).T @ x.reshape(-1, self.d_in)
        b = self.params.get("b")
        if b is not None and b.trainable:
            b.grad += dy.reshape(-1, self.d_out).sum(axis=0)
        return dy @ self.weight()


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.d, self.eps = d, eps
        self.params["g"] = Param(np.ones(d))
        self.params["b"] = Param(np.zeros(d))

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
        xh = xc * inv
        self._xh, self._inv = xh, inv
        return xh * self.params["g"].value + self.params["b"].value

    def backward(self, dy):
        xh, inv = self._xh, self._inv
        g, b = self.params["g"], self.params["b"]
        if g.trainable:
            g.grad += (dy * xh).reshape(-1, self.d).sum(axis=0)
        if b.trainable:
            b.grad += dy.reshape(-1, self.d).sum(axis=0)
        dxh = dy * g.value
        return inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                      - xh * (dxh * xh).mean(axis=-1, keepdims=True))


_GELU_C = math.sqrt(2.0 / math.pi)


class GELU(Module):
    """tanh-approximated GELU (smooth everywhere, unlike ReLU)."""

    def forward(self, x):
        u = _GELU_C * (x + 0.044715 * x * x * x)
        t = np.tanh(u)
        self._x, self._t = x, t
        return 0.5 * x * (1.0 + t)

    def backward(self, dy):
        x, t = self._x, self._t
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


class Softplus(Module):
    def forward(self, x):
        self._x = x
        return np.logaddexp(0.0, x)

    def backward(self, dy):
        return dy * sigmoid(self._x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class MLP(Module):
    """Two fully-connected layers with a GELU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng):
        super().__init__()
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.act = GELU()
        self.fc2 = Linear(d_hidden, d_out, rng)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))

    def backward(self, dy):
        return self.fc1.backward(self.act.backward(self.fc2.backward(dy)))


class MultiHeadAttention(Module):
    """Multi-head scaled dot-product self-attention over the token axis.

    ``wq``/``wk``/``wv``/``wo`` are plain attributes so that adapters can
    replace the query and value projections in place.
    """

    def __init__(self, d: int, n_heads: int, rng, causal: bool = False):
        super().__init__()
        if d % n_heads:
            raise ShapeError(f"width {d} not divisible by {n_heads} heads")
        self.d, self.h, self.dh = d, n_heads, d // n_heads
        self.causal = causal
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)

    def _split(self, x):
        *lead, T, _ = x.shape
        return x.reshape(*lead, T, self.h, self.dh).swapaxes(-2, -3)

    def _merge(self, x):
        *lead, h, T, dh = x.shape
        return x.swapaxes(-2, -3).reshape(*lead, T, h * dh)

    def forward(self, x):
        if x.shape[-1] != self.d:
            raise ShapeError(f"attention expects width {self.d}, got {x.shape[-1]}")
        q = self._split(self.wq(x))
        k = self._split(self.wk(x))
        v = self._split(self.wv(x))
        scale = 1.0 / math.sqrt(self.dh)
        s = (q @ k.swapaxes(-1, -2)) * scale
        if self.causal:
            T = x.shape[-2]
            s = s + np.triu(np.full((T, T), -np.inf), 1)
        s = s - s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=-1, keepdims=True)
        self._q, self._k, self._v, self._a, self._scale = q, k, v, a, scale
        return self.wo(self._merge(a @ v))

    def backward(self, dy):
        q, k, v, a, scale = self._q, self._k, self._v, self._a, self._scale
        do = self._split(self.wo.backward(dy))
        da = do @ v.swapaxes(-1, -2)
        dv = a.swapaxes(-1, -2) @ do
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.swapaxes(-1, -2) @ q
        return (self.wq.backward(self._merge(dq)) + self.wk.backward(self._merge(dk))
                + self.wv.backward(self._merge(dv)))


class PostNormBlock(Module):
    """``X <- LN(ATT(X) + X)`` then ``X <- LN(MLP(X) + X)``."""

    def __init__(self, d: int, n_heads: int, d_ff: int, rng):
        super().__init__()
        self.att = MultiHeadAttention(d, n_heads, rng)
        self.ln1 = LayerNorm(d)
        self.mlp = MLP(d, d_ff, d, rng)
        self.ln2 = LayerNorm(d)

    def forward(self, x):
        x = self.ln1(self.att(x) + x)
        return self.ln2(self.mlp(x) + x)

    def backward(self, dy):
        d1 = self.ln2.backward(dy)
        d1 = self.mlp.backward(d1) + d1
        d0 = self.ln1.backward(d1)
        return self.att.backward(d0) + d0


class PreNormBlock(Module):
    """Causal decoder block: ``X + ATT(LN(X))`` then ``X + MLP(LN(X))``."""

    def __init__(self, d: int, n_heads: int, d_ff: int, rng):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.att = MultiHeadAttention(d, n_heads, rng, causal=True)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, d_ff, d, rng)

    def forward(self, x):
        x = x + self.att(self.ln1(x))
        return x + self.mlp(self.ln2(x))

    def backward(self, dy):
        d1 = dy + self.ln2.backward(self.mlp.backward(dy))
        return d1 + self.ln1.backward(self.att.backward(d1))


class SqueezeExcite(Module):
    """Channel gating: mean over tokens, bottleneck MLP, sigmoid, rescale.

    Input ``(..., T, C)``; the gate is one vector of length C per sample.
    """

    def __init__(self, c: int, rng, reduction: int = 4):
        super().__init__()
        self.fc1 = Linear(c, max(1, c // reduction), rng)
        self.act = GELU()
        self.fc2 = Linear(max(1, c // reduction), c, rng)

    def forward(self, x):
        s = x.mean(axis=-2)
        g = sigmoid(self.fc2(self.act(self.fc1(s))))
        self._x, self._g = x, g
        return x * g[..., None, :]

    def backward(self, dy):
        x, g = self._x, self._g
        dg = (dy * x).sum(axis=-2)
        dz = dg * g * (1.0 - g)
        ds = self.fc1.backward(self.act.backward(self.fc2.backward(dz)))
        T = x.shape[-2]
        return dy * g[..., None, :] + ds[..., None, :] / T


class PositionalEmbedding(Module):
    """Learned additive position table; inputs may be shorter than ``max_len``."""

    def __init__(self, max_len: int, d: int, rng, std: float = 0.02):
        super().__init__()
        self.max_len = max_len
        self.params["P"] = Param(std * rng.gen.standard_normal((max_len, d)))

    def forward(self, x):
        T = x.shape[-2]
        if T > self.max_len:
            raise ShapeError(f"{T} tokens exceed positional table of {self.max_len}")
        self._T = T
        return x + self.params["P"].value[:T]

    def backward(self, dy):
        P = self.params["P"]
        if P.trainable:
            P.grad[: self._T] += dy.reshape(-1, self._T, dy.shape[-1]).sum(axis=0)
        return dy
