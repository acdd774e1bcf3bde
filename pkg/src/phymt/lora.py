"""Low-rank adapters, NormalFloat quantization and quantization-aware init.

Weights follow the (d1, d2) = (d_out, d_in) convention of :class:`Linear`.
An adapter adds ``A @ B.T`` with ``A`` of shape (d1, r) and ``B`` of shape
(d2, r); it is applied as ``x W^T + (x B) A^T`` so the rank-r product is
never formed during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import CorruptFileError, InvalidRankError, ShapeError, ValidationError
from .nn.layers import Linear, Module, Param, check_finite
from .numerics import svd


# ---------------------------------------------------------------- NF4

@dataclass
class QuantizedMatrix:
    """``indices`` in ``[0, 2^bits)`` plus the per-matrix scale ``sigma``."""

    indices: np.ndarray
    sigma: float
    bits: int = 4

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.uint8)
        if self.indices.size and int(self.indices.max()) >= 1 << self.bits:
            raise ValidationError("quantization index out of range")
        if not self.sigma >= 0:
            raise ValidationError("sigma must be >= 0")

    @property
    def shape(self):
        return self.indices.shape

    def dequantize(self) -> np.ndarray:
        return nf4_dequantize(self)


def _levels(bits: int) -> int:
    return (1 << bits) - 1


def nf4_quantize(W, bits: int = 4, sigma: float | None = None) -> QuantizedMatrix:
    """Gaussian-quantile quantization ``round((2^bits - 1) * Phi(w / sigma))``.

    ``sigma`` defaults to the population standard deviation of ``W``; pass
    a stored scale to requantize against an existing codebook. Exact .5 ties
    round away from the codebook center, which keeps the map odd-symmetric
    and makes requantizing a dequantized level return the same index at both
    ends of the range.
    """
    W = np.asarray(W, dtype=float)
    if not np.all(np.isfinite(W)):
        raise ValidationError("cannot quantize non-finite weights")
    if sigma is None:
        sigma = float(W.std())
    n = _levels(bits)
    if sigma == 0:
        return QuantizedMatrix(np.full(W.shape, 1 << (bits - 1), dtype=np.uint8), 0.0, bits)
    v = n * ndtr(W / sigma)
    idx = np.where(v >= n / 2, np.floor(v + 0.5), np.ceil(v - 0.5))
    return QuantizedMatrix(np.clip(idx, 0, n).astype(np.uint8), float(sigma), bits)


def nf4_codebook(bits: int = 4, sigma: float = 1.0) -> np.ndarray:
    """Level values for indices ``0 .. 2^bits - 1``."""
    n = _levels(bits)
    delta = 1.0 / (2 * n)
    p = np.clip(np.arange(n + 1) / n, delta, 1.0 - delta)
    return sigma * ndtri(p)


def nf4_dequantize(Q: QuantizedMatrix) -> np.ndarray:
    if Q.sigma == 0:
        return np.zeros(Q.shape)
    return nf4_codebook(Q.bits, Q.sigma)[Q.indices]


def quantization_error(W, Q: QuantizedMatrix) -> float:
    return float(np.linalg.norm(np.asarray(W) - nf4_dequantize(Q)))


# ---------------------------------------------------------------- adapters

class LoraAdapter(Module):
    """Trainable factors ``A`` (d1, r) and ``B`` (d2, r)."""

    def __init__(self, A, B):
        super().__init__()
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
            raise ShapeError(f"adapter factors {A.shape}, {B.shape} disagree on rank")
        self.params["A"] = Param(A)
        self.params["B"] = Param(B)

    @property
    def rank(self) -> int:
        return self.params["A"].shape[1]

    @property
    def A(self):
        return self.params["A"].value

    @property
    def B(self):
        return self.params["B"].value

    def delta(self) -> np.ndarray:
        return self.A @ self.B.T


def lora_init(d1: int, d2: int, r: int, rng, sigma_init: float = 0.02) -> LoraAdapter:
    """``A ~ N(0, sigma_init^2)``, ``B = 0``: a zero update at initialization."""
    if r < 1 or r > min(d1, d2):
        raise InvalidRankError(f"rank {r} outside [1, {min(d1, d2)}]")
    return LoraAdapter(sigma_init * rng.gen.standard_normal((d1, r)), np.zeros((d2, r)))


def _base_matrix(base) -> np.ndarray:
    return nf4_dequantize(base) if isinstance(base, QuantizedMatrix) else np.asarray(base)


def lora_forward(base, adapter: LoraAdapter, x) -> np.ndarray:
    """``x base^T + (x B) A^T`` for row inputs ``x`` of shape (..., d2)."""
    Wb = _base_matrix(base)
    if x.shape[-1] != Wb.shape[1] or adapter.A.shape[0] != Wb.shape[0] \
            or adapter.B.shape[0] != Wb.shape[1]:
        raise ShapeError("base, adapter and input shapes disagree")
    return x @ Wb.T + (x @ adapter.B) @ adapter.A.T


def merge_adapters(base, adapter: LoraAdapter) -> np.ndarray:
    Wb = _base_matrix(base)
    if Wb.shape != (adapter.A.shape[0], adapter.B.shape[0]):
        raise ShapeError(f"base {Wb.shape} vs adapter {(adapter.A.shape[0], adapter.B.shape[0])}")
    return Wb + adapter.delta()


class LoRALinear(Module):
    """A frozen (optionally quantized) linear map with a trainable adapter.

    The quantized base is dequantized once at construction; it never changes,
    so this is the same as dequantizing on every forward pass.
    """

    def __init__(self, W, b, adapter: LoraAdapter, quant: QuantizedMatrix | None = None):
        super().__init__()
        self.quant = quant
        if quant is None:
            self.params["W"] = Param(W, trainable=False)
            self._W = self.params["W"].value
        else:
            self._W = nf4_dequantize(quant)
        if b is not None:
            self.params["b"] = Param(b, trainable=False)
        self.adapter = adapter
        self.d_out, self.d_in = self._W.shape

    def weight(self) -> np.ndarray:
        return self._W

    def set_quantized(self, quant: QuantizedMatrix):
        self.params.pop("W", None)
        self.quant = quant
        self._W = nf4_dequantize(quant)

    def merged(self) -> np.ndarray:
        return self._W + self.adapter.delta()

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"expected last dim {self.d_in}, got {x.shape[-1]}")
        A, B = self.adapter.A, self.adapter.B
        xb = x @ B
        self._x, self._xb = x, xb
        y = x @ self._W.T + xb @ A.T
        if "b" in self.params:
            y = y + self.params["b"].value
        return check_finite(y, "LoRALinear")

    def backward(self, dy):
        x, xb = self._x, self._xb
        pA, pB = self.adapter.params["A"], self.adapter.params["B"]
        dyA = dy @ pA.value
        r = pA.shape[1]
        if pA.trainable:
            pA.grad += dy.reshape(-1, self.d_out).T @ xb.reshape(-1, r)
        if pB.trainable:
            pB.grad += x.reshape(-1, self.d_in).T @ dyA.reshape(-1, r)
        b = self.params.get("b")
        if b is not None and b.trainable:
            b.grad += dy.reshape(-1, self.d_out).sum(axis=0)
        return dy @ self._W + dyA @ pB.value.T


# ---------------------------------------------------------------- LoftQ

@dataclass
class LoftqResult:
    """Best iterate of the alternating initialization.

    ``trace[i]`` is ``||W - Q_i - A_i B_i^T||_F`` after the SVD step of
    iteration i; ``pre_svd[i]`` is ``||W - Q_i - A_{i-1} B_{i-1}^T||_F``
    right after its quantization step.
    """

    Q: QuantizedMatrix
    A: np.ndarray
    B: np.ndarray
    trace: list = field(default_factory=list)
    pre_svd: list = field(default_factory=list)
    best_iter: int = 0
    naive_error: float = 0.0

    @property
    def error(self) -> float:
        return self.trace[self.best_iter]


def low_rank_factors(R, r: int):
    """``A = U_r sqrt(S_r)``, ``B = V_r sqrt(S_r)`` from the top-r singular triples."""
    U, s, V = svd(R)
    root = np.sqrt(s[:r])
    return U[:, :r] * root, V[:, :r] * root


def loftq_init(W, r: int, bits: int = 4, iters: int = 5) -> LoftqResult:
    """Alternate quantization of ``W - A B^T`` and rank-r SVD of ``W - Q``."""
    W = np.asarray(W, dtype=float)
    d1, d2 = W.shape
    if r < 1 or r > min(d1, d2):
        raise InvalidRankError(f"rank {r} outside [1, {min(d1, d2)}]")
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    naive = nf4_quantize(W, bits)
    res = LoftqResult(naive, np.zeros((d1, r)), np.zeros((d2, r)),
                      naive_error=quantization_error(W, naive))
    A, B = res.A, res.B
    best = np.inf
    for i in range(iters):
        Q = nf4_quantize(W - A @ B.T, bits)
        Wq = nf4_dequantize(Q)
        res.pre_svd.append(float(np.linalg.norm(W - Wq - A @ B.T)))
        A, B = low_rank_factors(W - Wq, r)
        err = float(np.linalg.norm(W - Wq - A @ B.T))
        res.trace.append(err)
        if err < best:
            best = err
            res.Q, res.A, res.B, res.best_iter = Q, A, B, i
    return res


# ---------------------------------------------------------------- model wiring

QUANT_MODES = ("none", "nf4", "loftq")


def attach_adapters(backbone, rng, r: int = 8, mode: str = "none", sigma_init: float = 0.02,
                    iters: int = 5, bits: int = 4):
    """Replace every backbone query/value projection with a :class:`LoRALinear`.

    ``mode`` selects the base: ``none`` keeps full precision, ``nf4`` uses
    naive quantization, both with the Gaussian/zero adapter init; ``loftq``
    uses the alternating initialization for both base and adapter. All
    non-adapter backbone parameters are frozen.
    """
    if mode not in QUANT_MODES:
        raise ValidationError(f"unknown quantization mode {mode!r}")
    backbone.freeze()
    for att in backbone.attention_layers():
        for name in ("wq", "wv"):
            lin = getattr(att, name)
            if isinstance(lin, LoRALinear):
                raise ValidationError("adapters already attached")
            W = lin.params["W"].value
            b = lin.params["b"].value if "b" in lin.params else None
            d1, d2 = W.shape
            if mode == "loftq":
                res = loftq_init(W, r, bits, iters)
                new = LoRALinear(None, b, LoraAdapter(res.A, res.B), quant=res.Q)
            else:
                ad = lora_init(d1, d2, r, rng, sigma_init)
                q = nf4_quantize(W, bits) if mode == "nf4" else None
                new = LoRALinear(W if q is None else None, b, ad, quant=q)
            setattr(att, name, new)
    return backbone


def lora_layers(module):
    """All :class:`LoRALinear` instances under ``module`` with their names."""
    out = []

    def walk(m, prefix):
        if isinstance(m, LoRALinear):
            out.append((prefix.rstrip("."), m))
            return
        for name, c in m.children():
            walk(c, f"{prefix}{name}.")

    walk(module, "")
    return out


def merge_model(backbone):
    """Swap each adapted projection for a plain Linear holding ``W + A B^T``."""
    from .numerics import SeededRng

    for att in backbone.attention_layers():
        for name in ("wq", "wv"):
            lin = getattr(att, name)
            if not isinstance(lin, LoRALinear):
                continue
            plain = Linear(lin.d_in, lin.d_out, SeededRng(0), bias="b" in lin.params)
            plain.params["W"].value[...] = lin.merged()
            if "b" in lin.params:
                plain.params["b"].value[...] = lin.params["b"].value
            plain.freeze()
            setattr(att, name, plain)
    return backbone


# ---------------------------------------------------------------- 4-bit packing

def pack_nibbles(indices) -> bytes:
    """Two 4-bit indices per byte, the first in the low nibble."""
    flat = np.asarray(indices, dtype=np.uint8).reshape(-1)
    if flat.size and int(flat.max()) > 15:
        raise ValidationError("index does not fit in 4 bits")
    if flat.size % 2:
        flat = np.append(flat, np.uint8(0))
    return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(buf: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8)
    if raw.size != (count + 1) // 2:
        raise CorruptFileError(f"expected {(count + 1) // 2} packed bytes, got {raw.size}")
    out = np.empty(raw.size * 2, dtype=np.uint8)
    out[0::2] = raw & 0x0F
    out[1::2] = raw >> 4
    return out[:count]


def storage_ratio_vs_fp16(Q: QuantizedMatrix) -> float:
    """Packed index bytes relative to float16 storage of the same matrix."""
    return len(pack_nibbles(Q.indices)) / (2.0 * Q.indices.size)
