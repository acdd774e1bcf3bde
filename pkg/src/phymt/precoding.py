"""Downlink multi-user MISO precoding.

Channels are ``H`` of shape (N_T, K) whose column ``k`` is ``h_k``; user
``k`` receives ``h_k^H sum_j w_j x_j + n``. Precoders ``W`` have the same
shape, column ``k`` being ``w_k``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (DegenerateOutputError, InvalidInputError, NumericalFailure, ShapeError,
                     SingularSystemError)
from .numerics import solve_hermitian, svd


class LabelQualityWarning(UserWarning):
    """A fitted (lambda, p) label does not reproduce its WMMSE rate."""


@dataclass
class PrecoderSet:
    W: np.ndarray
    p_max: float

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.complex128)
        total = float(np.sum(np.abs(self.W) ** 2))
        if total > self.p_max * (1 + 1e-9) + 1e-300:
            raise InvalidInputError(f"precoder power {total} exceeds budget {self.p_max}")

    @property
    def powers(self) -> np.ndarray:
        return np.sum(np.abs(self.W) ** 2, axis=0)


@dataclass
class PowerParams:
    """The 2K parameters of the structured precoder.

    ``rate_ratio`` is filled in by :func:`fit_power_params` with the rate of
    the reconstructed precoder relative to the WMMSE one.
    """

    lam: np.ndarray
    p: np.ndarray
    p_max: float
    rate_ratio: float | None = None

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        if np.any(self.lam < 0) or np.any(self.p < 0):
            raise InvalidInputError("lambda and p must be non-negative")

    @property
    def label_ok(self) -> bool:
        return self.rate_ratio is None or self.rate_ratio >= 0.99


def _check(H, W=None):
    H = np.asarray(H)
    if H.ndim != 2:
        raise ShapeError(f"H must be (N_T, K), got {H.shape}")
    if W is not None and np.shape(W) != H.shape:
        raise ShapeError(f"W shape {np.shape(W)} does not match H {H.shape}")
    return H


def _gains(H, W) -> np.ndarray:
    # |h_k^H w_j|^2 indexed [k, j]
    return np.abs(H.conj().T @ W) ** 2


def sinr(H, W, sigma2: float) -> np.ndarray:
    """SINR of every user."""
    W = W.W if isinstance(W, PrecoderSet) else np.asarray(W)
    H = _check(H, W)
    if sigma2 <= 0:
        raise InvalidInputError("sigma2 must be > 0")
    G = _gains(H, W)
    signal = np.diag(G)
    return signal / (G.sum(axis=1) - signal + sigma2)


def sinr_k(H, W, sigma2: float, k: int) -> float:
    return float(sinr(H, W, sigma2)[k])


def sum_rate(H, W, sigma2: float) -> float:
    """``sum_k log2(1 + SINR_k)`` in bit/s/Hz."""
    return float(np.sum(np.log2(1.0 + sinr(H, W, sigma2))))


def structured_precoder(H, params: PowerParams, sigma2: float) -> PrecoderSet:
    """Precoder ``w_k = sqrt(p_k) * normalize((I + sum_j lam_j/sigma2 h_j h_j^H)^-1 h_k)``."""
    H = _check(H)
    n_t, K = H.shape
    if params.lam.shape != (K,) or params.p.shape != (K,):
        raise ShapeError("lambda and p must have one entry per user")
    A = np.eye(n_t) + (H * (params.lam / sigma2)) @ H.conj().T
    A = 0.5 * (A + A.conj().T)
    X = solve_hermitian(A, H)
    norms = np.linalg.norm(X, axis=0)
    if np.any(norms == 0):
        raise SingularSystemError("structured precoder direction vanished")
    W = X / norms * np.sqrt(params.p)
    return PrecoderSet(W, float(params.p_max))


def scale_to_budget(lam_hat, p_hat, p_max: float) -> PowerParams:
    """Rescale non-negative vectors so each sums to ``p_max``."""
    lam_hat = np.asarray(lam_hat, dtype=float)
    p_hat = np.asarray(p_hat, dtype=float)
    if np.any(lam_hat < 0) or np.any(p_hat < 0):
        raise InvalidInputError("entries must be non-negative")
    sl, sp = lam_hat.sum(), p_hat.sum()
    if sl <= 0 or sp <= 0:
        raise DegenerateOutputError("cannot scale an all-zero vector to the power budget")
    return PowerParams(p_max * lam_hat / sl, p_max * p_hat / sp, p_max)


def mrt_precoder(H, p_max: float) -> PrecoderSet:
    """Matched-filter directions with equal power split."""
    H = _check(H)
    K = H.shape[1]
    return PrecoderSet(H / np.linalg.norm(H, axis=0) * math.sqrt(p_max / K), p_max)


def zf_precoder(H, p_max: float, sigma2: float | None = None) -> PrecoderSet:
    """Zero-forcing directions ``H (H^H H)^-1``, normalized, equal power."""
    H = _check(H)
    n_t, K = H.shape
    if K > n_t:
        raise SingularSystemError(f"zero forcing needs K <= N_T, got K={K}, N_T={n_t}")
    G = H.conj().T @ H
    G = 0.5 * (G + G.conj().T)
    s = svd(H)[1]
    if s[-1] <= 1e-10 * s[0]:
        raise SingularSystemError("channel is rank deficient")
    D = H @ solve_hermitian(G, np.eye(K))
    W = D / np.linalg.norm(D, axis=0) * math.sqrt(p_max / K)
    return PrecoderSet(W, p_max)


def _wmmse_transmit(g, weights_u, omega, u, p_max):
    # Transmit update in the K-dim column space of H. g: (K, K) reduced
    # channels (column k = U^H h_k). Solves for mu >= 0 so that total power
    # equals p_max, unless the unconstrained solution already fits.
    Phi = (g * weights_u) @ g.conj().T
    Phi = 0.5 * (Phi + Phi.conj().T)
    d, E = np.linalg.eigh(Phi)
    rhs = g * (omega * u)
    c = np.sum(np.abs(E.conj().T @ rhs) ** 2, axis=1)

    def power(mu):
        return float(np.sum(c / (d + mu) ** 2))

    if d[0] > 1e-12 * max(d[-1], 1e-300) and power(0.0) <= p_max:
        mu = 0.0
    else:
        hi = math.sqrt(np.sum(c) / p_max) + max(0.0, -d[0])
        if power(hi) > p_max * (1 + 1e-12):
            raise NumericalFailure("WMMSE bisection failed to bracket the power multiplier")
        lo = max(0.0, -d[0])
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            if power(mid) > p_max:
                lo = mid
            else:
                hi = mid
        mu = hi
    coeff = (E.conj().T @ rhs) / (d + mu)[:, None]
    return E @ coeff


def wmmse_precoder(H, p_max: float, sigma2: float, iters: int = 20):
    """Weighted-MMSE sum-rate maximization.

    Starts from MRT with equal power and alternates the receiver scalars
    ``u_k``, MSE weights ``1/e_k`` and the transmit filter, the latter with
    a bisection on the power multiplier so the budget is met with equality.

    Returns
    -------
    PrecoderSet, list of float
        Final precoder and the sum rate after every iteration.
    """
    H = _check(H)
    if iters < 1:
        raise InvalidInputError("iters must be >= 1")
    U, s, _ = svd(H)
    rank = int(np.sum(s > 1e-12 * s[0]))
    Ur = U[:, :rank]
    g = Ur.conj().T @ H
    W = mrt_precoder(H, p_max).W
    trace = []
    for _ in range(iters):
        hw = H.conj().T @ W
        total = np.sum(np.abs(hw) ** 2, axis=1) + sigma2
        direct = np.diag(hw)
        u = direct / total
        e = 1.0 - np.abs(direct) ** 2 / total
        omega = 1.0 / e
        Wr = _wmmse_transmit(g, omega * np.abs(u) ** 2, omega, u, p_max)
        W = Ur @ Wr
        trace.append(sum_rate(H, W, sigma2))
    # bisection leaves the power a hair under budget on the feasible side
    tot = np.sum(np.abs(W) ** 2)
    if tot > p_max:
        W = W * math.sqrt(p_max / tot)
    return PrecoderSet(W, p_max), trace


def _project_simplex(v, total):
    # Euclidean projection onto {x >= 0, sum x = total}.
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    ind = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def _fit_objective(H, W, p, lam, sigma2, need_grad=True):
    # sum_k min_phase ||w_hat_k - w_k||^2 and its gradient in lam.
    n_t, K = H.shape
    A = np.eye(n_t) + (H * (lam / sigma2)) @ H.conj().T
    A = 0.5 * (A + A.conj().T)
    X = solve_hermitian(A, H)
    n = np.linalg.norm(X, axis=0)
    a = np.sum(X.conj() * W, axis=0)
    absa = np.abs(a)
    sp = np.sqrt(p)
    wn2 = np.sum(np.abs(W) ** 2, axis=0)
    f = float(np.sum(p + wn2 - 2 * sp * absa / n))
    if not need_grad:
        return f, None
    C = H.conj().T @ X            # C[j, k] = h_j^H x_k
    G = X.conj().T @ X            # G[k, j] = x_k^H x_j
    E = X.conj().T @ W            # E[j, k] = x_j^H w_k
    da = -np.conj(C) * E / sigma2                       # da_k / dlam_j at [j, k]
    safe = np.where(absa > 0, absa, 1.0)
    dabs = np.real(np.conj(a)[None, :] / safe[None, :] * da)
    dn = -np.real(C * G.T) / (sigma2 * n[None, :])
    df = -2 * sp[None, :] * (dabs / n[None, :] - absa[None, :] * dn / n[None, :] ** 2)
    return f, df.sum(axis=1)


def _implied_lambda(H, W, sigma2):
    # Multipliers implied by WMMSE stationarity: lam_j = sigma2 omega_j |u_j|^2 / mu.
    hw = H.conj().T @ W
    total = np.sum(np.abs(hw) ** 2, axis=1) + sigma2
    direct = np.diag(hw)
    u = direct / total
    omega = total / (total - np.abs(direct) ** 2)
    wu = omega * np.abs(u) ** 2
    P = np.sum(np.abs(W) ** 2)
    mu = np.real(np.sum(omega * np.conj(u) * direct) - np.sum(wu * np.sum(np.abs(hw) ** 2, axis=1))) / P
    if not mu > 0:
        return None
    return sigma2 * wu / mu


def fit_power_params(W, H, sigma2: float, p_max: float, lam0=None, max_iter: int = 500,
                     rtol: float = 1e-8, atol: float = 1e-9) -> PowerParams:
    """Recover (lambda, p) labels reproducing a given (WMMSE) precoder.

    ``p_k = ||w_k||^2``; lambda minimizes the phase-aligned reconstruction
    error ``sum_k ||w_hat_k(lambda, p) - w_k||^2`` over the simplex
    ``{lambda >= 0, sum lambda = p_max}`` by projected gradient descent with
    step halving, stopping after ``max_iter`` steps, when the relative
    decrease drops below ``rtol``, or once the error is below
    ``atol * p_max``. The start point is ``lam0`` if given, otherwise the
    multipliers implied by WMMSE stationarity (uniform as a fallback).

    If the structured precoder built from the result falls short of 99% of
    the rate of ``W``, a :class:`LabelQualityWarning` is emitted; the ratio
    is kept in ``rate_ratio`` either way.
    """
    W = W.W if isinstance(W, PrecoderSet) else np.asarray(W, dtype=np.complex128)
    H = _check(H, W)
    K = H.shape[1]
    p = np.sum(np.abs(W) ** 2, axis=0)
    p = p * (p_max / p.sum())
    if lam0 is None:
        lam0 = _implied_lambda(H, W, sigma2)
    if lam0 is None or not np.all(np.isfinite(lam0)) or np.sum(lam0) <= 0:
        lam0 = np.full(K, p_max / K)
    lam = _project_simplex(np.asarray(lam0, dtype=float) * (p_max / max(np.sum(lam0), 1e-300)), p_max)

    f, grad = _fit_objective(H, W, p, lam, sigma2)
    step = p_max / max(np.linalg.norm(grad), 1e-300) * 0.1
    for _ in range(max_iter):
        if f <= atol * p_max:
            break
        improved = False
        for _ in range(60):
            cand = _project_simplex(lam - step * grad, p_max)
            fc, _ = _fit_objective(H, W, p, cand, sigma2, need_grad=False)
            if fc < f:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        rel = (f - fc) / max(abs(f), 1e-300)
        lam = cand
        f, grad = _fit_objective(H, W, p, lam, sigma2)
        step *= 2.0
        if rel < rtol:
            break

    params = PowerParams(lam, p, p_max)
    target = sum_rate(H, W, sigma2)
    got = sum_rate(H, structured_precoder(H, params, sigma2).W, sigma2)
    params.rate_ratio = got / target if target > 0 else 1.0
    if not params.label_ok:
        warnings.warn(f"fitted label recovers only {params.rate_ratio:.4f} of the WMMSE rate",
                      LabelQualityWarning, stacklevel=2)
    return params
