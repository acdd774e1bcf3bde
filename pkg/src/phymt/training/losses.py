"""Task losses, each returning ``(loss, d loss / d prediction)``.

Batched predictions are averaged over every leading axis, so the per-sample
normalizations below are exactly the per-sample formulas.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from ..precoding import PowerParams, structured_precoder, sum_rate


def _same(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def loss_pre_supervised(out, lam, p):
    """``(1/2K)(||p - p_hat||^2 + ||lam - lam_hat||^2)`` on ``out = [lam_hat, p_hat]``.

    ``out`` is (..., K, 2); ``lam`` and ``p`` are (..., K).
    """
    target = np.stack([lam, p], axis=-1)
    _same(out, target)
    K = out.shape[-2]
    n = out.size // (2 * K)
    e = out - target
    return float(np.sum(e * e)) / (2 * K * n), e / (K * n)


def loss_det(x_hat, x_true):
    """``(1/2K) ||X - X_hat||_F^2`` for (..., K, 2) real/imag symbol arrays."""
    _same(x_hat, x_true)
    K = x_hat.shape[-2]
    n = x_hat.size // (2 * K)
    e = x_hat - x_true
    return float(np.sum(e * e)) / (2 * K * n), e / (K * n)


def loss_cp(pred, truth):
    """``(1/(2 M T2)) ||X - X_hat||_F^2`` for (..., T2, M, 2) arrays."""
    _same(pred, truth)
    per = pred.shape[-3] * pred.shape[-2] * 2
    n = pred.size // per
    e = pred - truth
    return float(np.sum(e * e)) / (per * n), 2 * e / (per * n)


def negative_rate(lam_hat, p_hat, H, sigma2: float, p_max: float) -> float:
    """Minus the sum rate of the structured precoder after budget scaling."""
    lam_hat = np.asarray(lam_hat, dtype=float)
    p_hat = np.asarray(p_hat, dtype=float)
    lam = p_max * lam_hat / lam_hat.sum()
    p = p_max * p_hat / p_hat.sum()
    W = structured_precoder(H, PowerParams(lam, p, p_max), sigma2).W
    return -sum_rate(H, W, sigma2)


def loss_pre_unsupervised(out, H, sigma2, p_max: float, step: float = 1e-5):
    """Minus sum rate and its central-difference gradient w.r.t. ``out``.

    ``out`` is (K, 2) = [lam_hat, p_hat] or a batch (B, K, 2) with ``H`` of
    shape (B, N_T, K) and per-sample ``sigma2``. Returns the batch mean.
    """
    out = np.asarray(out, dtype=float)
    single = out.ndim == 2
    if single:
        out, H, sigma2 = out[None], np.asarray(H)[None], np.atleast_1d(sigma2)
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (out.shape[0],))
    B, K, _ = out.shape
    total = 0.0
    grad = np.zeros_like(out)
    for b in range(B):
        o = out[b].copy()
        total += negative_rate(o[:, 0], o[:, 1], H[b], sigma2[b], p_max)
        for k in range(K):
            for c in range(2):
                old = o[k, c]
                o[k, c] = old + step
                fp = negative_rate(o[:, 0], o[:, 1], H[b], sigma2[b], p_max)
                o[k, c] = old - step
                fm = negative_rate(o[:, 0], o[:, 1], H[b], sigma2[b], p_max)
                o[k, c] = old
                grad[b, k, c] = (fp - fm) / (2 * step)
    grad /= B
    return total / B, grad[0] if single else grad


def richardson_check(out, H, sigma2, p_max: float, coarse: float = 1e-5, fine: float = 1e-6) -> float:
    """Max relative disagreement of the rate gradient between two FD steps."""
    _, g1 = loss_pre_unsupervised(out, H, sigma2, p_max, coarse)
    _, g2 = loss_pre_unsupervised(out, H, sigma2, p_max, fine)
    scale = max(float(np.max(np.abs(g1))), 1e-12)
    return float(np.max(np.abs(g1 - g2)) / scale)
