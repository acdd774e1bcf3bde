"""Channel-prediction data shaping, the NMSE objective, and an AR baseline.

A prediction sample is one antenna's history laid out as a real
``(T1, 2M)`` array: the first M columns are real parts across subcarriers,
the last M imaginary parts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateStatsError, InvalidInputError, NumericalFailure, ShapeError

NMSE_FLOOR_DB = -300.0


@dataclass
class NormStats:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise DegenerateStatsError("sigma must be positive")


@dataclass
class CpSample:
    history: np.ndarray
    future: np.ndarray
    tags: dict = field(default_factory=dict)


def to_real(H) -> np.ndarray:
    """Complex (..., M) -> real (..., 2M) with re/im halves."""
    H = np.asarray(H)
    return np.concatenate([H.real, H.imag], axis=-1)


def to_complex(X) -> np.ndarray:
    X = np.asarray(X)
    m = X.shape[-1] // 2
    return X[..., :m] + 1j * X[..., m:]


def normalize(X):
    """Zero-mean, unit-std rescaling over all entries; returns ``(X', stats)``."""
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("input contains non-finite entries")
    mu = float(X.mean())
    sigma = float(X.std())
    if np.ptp(X) == 0 or not sigma > 0:
        raise DegenerateStatsError("cannot normalize a constant tensor")
    return (X - mu) / sigma, NormStats(mu, sigma)


def denormalize(X, stats: NormStats) -> np.ndarray:
    return np.asarray(X) * stats.sigma + stats.mu


def patchify(X, patch: int) -> np.ndarray:
    """Group ``patch`` consecutive rows into one, zero-padding the tail.

    ``(T1, C) -> (ceil(T1/patch), patch*C)``; leading batch axes pass through.
    """
    if patch < 1:
        raise InvalidInputError("patch size must be >= 1")
    X = np.asarray(X)
    T1, C = X.shape[-2:]
    n = -(-T1 // patch)
    pad = n * patch - T1
    if pad:
        widths = [(0, 0)] * (X.ndim - 2) + [(0, pad), (0, 0)]
        X = np.pad(X, widths)
    return X.reshape(X.shape[:-2] + (n, patch * C))


def nmse_db(pred, truth) -> float:
    """``10 log10(sum |pred-truth|^2 / sum |truth|^2)``, floored at -300 dB."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {truth.shape}")
    den = float(np.sum(np.abs(truth) ** 2))
    if den == 0:
        raise InvalidInputError("truth has zero energy")
    ratio = float(np.sum(np.abs(pred - truth) ** 2)) / den
    if ratio <= 0:
        return NMSE_FLOOR_DB
    return max(10.0 * math.log10(ratio), NMSE_FLOOR_DB)


def ar_predict(history, order: int, horizon: int, ridge: float = 1e-6) -> np.ndarray:
    """Per-column AR(order) least-squares fit and recursive forecast.

    Constant columns are forecast as constants directly (an AR fixed point
    that the ridge term would otherwise shrink).
    """
    X = np.asarray(history, dtype=float)
    if X.ndim != 2:
        raise ShapeError("history must be (T1, C)")
    T1, C = X.shape
    if not (1 <= order < T1):
        raise InvalidInputError(f"need 1 <= order < T1, got order={order}, T1={T1}")
    out = np.empty((horizon, C))
    for c in range(C):
        x = X[:, c]
        if np.ptp(x) == 0:
            out[:, c] = x[0]
            continue
        # rows: [x_{t-1}, ..., x_{t-order}] -> x_t
        Phi = np.stack([x[order - 1 - i:T1 - 1 - i] for i in range(order)], axis=1)
        y = x[order:]
        G = Phi.T @ Phi + ridge * np.eye(order)
        if np.linalg.cond(G) > 1e13:
            raise NumericalFailure("AR design matrix is ill-conditioned")
        a = np.linalg.solve(G, Phi.T @ y)
        buf = list(x[-order:][::-1])
        for h in range(horizon):
            nxt = float(np.dot(a, buf[:order]))
            out[h, c] = nxt
            buf.insert(0, nxt)
    return out
