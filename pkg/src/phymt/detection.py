"""Uplink QAM symbols, linear and brute-force detectors, and error metrics."""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, InvalidInputError, ShapeError
from .numerics import solve_hermitian

ML_GUARD = 2 ** 20


def _gray(i):
    return i ^ (i >> 1)


@dataclass(frozen=True)
class Constellation:
    """Square P-QAM with independent Gray coding on the I and Q axes.

    ``points[s]`` is the unit-average-energy symbol that carries label ``s``.
    """

    order: int
    points: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        """Gray label of each entry of ``points`` (the index itself)."""
        return np.arange(self.order)

    @property
    def bits(self) -> int:
        return int(math.log2(self.order))

    @property
    def min_distance(self) -> float:
        return 2.0 / math.sqrt(2.0 * (self.order - 1) / 3.0)


@functools.lru_cache(maxsize=None)
def qam(order: int) -> Constellation:
    side = math.isqrt(order)
    if side * side != order or order < 4 or side & (side - 1):
        raise InvalidInputError(f"unsupported QAM order {order}")
    half_bits = side.bit_length() - 1
    scale = 1.0 / math.sqrt(2.0 * (order - 1) / 3.0)
    levels = 2 * np.arange(side) - (side - 1)
    points = np.empty(order, dtype=np.complex128)
    for i in range(side):
        for q in range(side):
            label = (_gray(i) << half_bits) | _gray(q)
            points[label] = scale * (levels[i] + 1j * levels[q])
    points.setflags(write=False)
    return Constellation(order, points)


@dataclass
class DetectionSample:
    """One uplink detection record over ``L0`` slots with a fixed channel.

    Attributes
    ----------
    H : (N_T, K) complex
    y : (N_T, L0) complex received slots
    x : (K, L0) complex transmitted symbols
    sym : (K, L0) int symbol labels
    sigma2 : float
    """

    H: np.ndarray
    y: np.ndarray
    x: np.ndarray
    sym: np.ndarray
    sigma2: float

    @property
    def n_slots(self) -> int:
        return self.y.shape[1]


def make_detection_sample(H, snr_db, rng, constellation: Constellation, n_slots: int = 8):
    """Draw symbols and noise for ``n_slots`` slots over one channel ``H``."""
    from .numerics import crandn

    H = np.asarray(H)
    K = H.shape[1]
    s2 = noise_variance(snr_db)
    sym = rng.gen.integers(0, constellation.order, size=(K, n_slots))
    x = constellation.points[sym]
    y = H @ x + math.sqrt(s2) * crandn(rng, H.shape[0], n_slots)
    return DetectionSample(H, y, x, sym, s2)


def qam_modulate(indices, constellation: Constellation) -> np.ndarray:
    idx = np.asarray(indices)
    if np.any(idx < 0) or np.any(idx >= constellation.order):
        raise InvalidInputError(f"symbol index outside [0, {constellation.order})")
    return constellation.points[idx]


def lmmse_detect(H, y, sigma2: float) -> np.ndarray:
    """``(H^H H + sigma2 I)^-1 H^H y`` for unit-energy symbols.

    ``y`` may be a vector or an (N_T, L) block of received slots sharing ``H``.
    """
    H = np.asarray(H)
    y = np.asarray(y)
    if sigma2 < 0:
        raise InvalidInputError("sigma2 must be >= 0")
    if y.shape[0] != H.shape[0]:
        raise ShapeError(f"y has {y.shape[0]} rows, H has {H.shape[0]}")
    G = H.conj().T @ H + sigma2 * np.eye(H.shape[1])
    G = 0.5 * (G + G.conj().T)
    return solve_hermitian(G, H.conj().T @ y)


@functools.lru_cache(maxsize=32)
def _candidates(order: int, K: int) -> np.ndarray:
    pts = qam(order).points
    idx = np.array(list(itertools.product(range(order), repeat=K)), dtype=np.int64)
    return idx, pts[idx].T


def ml_detect(H, y, constellation: Constellation, return_indices: bool = False):
    """Exhaustive maximum-likelihood detection over all P^K symbol vectors.

    Ties resolve to the lexicographically smallest index vector. ``y`` may
    hold several slots as columns.
    """
    H = np.asarray(H)
    y = np.asarray(y)
    K = H.shape[1]
    if constellation.order ** K > ML_GUARD:
        raise CapacityError(f"{constellation.order}^{K} candidates exceeds the {ML_GUARD} guard")
    idx, X = _candidates(constellation.order, K)
    vec = y.ndim == 1
    Y = y[:, None] if vec else y
    HX = H @ X
    d = (np.sum(np.abs(Y) ** 2, axis=0)[None, :]
         - 2 * np.real(HX.conj().T @ Y)
         + np.sum(np.abs(HX) ** 2, axis=0)[:, None])
    best = np.argmin(d, axis=0)
    sym = idx[best].T
    out = constellation.points[sym]
    if vec:
        out, sym = out[:, 0], sym[:, 0]
    return (out, sym) if return_indices else out


def hard_demod(x_hat, constellation: Constellation) -> np.ndarray:
    """Nearest-point decision; returns symbol labels with the shape of ``x_hat``."""
    x_hat = np.asarray(x_hat)
    d = np.abs(x_hat[..., None] - constellation.points) ** 2
    return np.argmin(d, axis=-1)


def hard_demod_ser(x_hat, x_true, constellation: Constellation):
    """Hard decisions and the fraction of them that differ from ``x_true``."""
    x_true = np.asarray(x_true)
    if np.shape(x_hat) != x_true.shape:
        raise ShapeError(f"shape mismatch {np.shape(x_hat)} vs {x_true.shape}")
    dec = hard_demod(x_hat, constellation)
    return dec, float(np.mean(dec != x_true))


def detection_nmse(x_hat, x_true) -> float:
    """Linear NMSE ``sum |x_hat - x|^2 / sum |x|^2``."""
    x_hat = np.asarray(x_hat)
    x_true = np.asarray(x_true)
    return float(np.sum(np.abs(x_hat - x_true) ** 2) / np.sum(np.abs(x_true) ** 2))


def noise_variance(snr_db: float) -> float:
    """Per-antenna noise power for unit-energy symbols and unit-gain channel entries."""
    return 10.0 ** (-snr_db / 10.0)


def monte_carlo_ser(K, n_t, order, snr_grid, trials, seed=0):
    """SER and NMSE of LMMSE and ML on i.i.d. Rayleigh channels.

    Each trial draws a fresh channel, one symbol vector and noise; both
    detectors see identical realizations.

    Returns
    -------
    dict
        ``{snr: {"lmmse_ser", "ml_ser", "lmmse_nmse"}}``
    """
    from .numerics import SeededRng, crandn

    const = qam(order)
    out = {}
    for j, snr in enumerate(snr_grid):
        rng = SeededRng(seed, 100 + j)
        s2 = noise_variance(snr)
        err_l = err_m = 0
        num = den = 0.0
        for _ in range(trials):
            H = crandn(rng, n_t, K)
            sym = rng.gen.integers(0, order, size=K)
            x = const.points[sym]
            y = H @ x + math.sqrt(s2) * crandn(rng, n_t, 1)[:, 0]
            xl = lmmse_detect(H, y, s2)
            _, sm = ml_detect(H, y, const, return_indices=True)
            err_l += int(np.sum(hard_demod(xl, const) != sym))
            err_m += int(np.sum(sm != sym))
            num += float(np.sum(np.abs(xl - x) ** 2))
            den += float(np.sum(np.abs(x) ** 2))
        out[snr] = {"lmmse_ser": err_l / (trials * K), "ml_ser": err_m / (trials * K),
                    "lmmse_nmse": num / den}
    return out
