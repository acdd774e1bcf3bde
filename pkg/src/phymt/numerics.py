"""Dense linear algebra and seeded random generation.

Every other module draws its randomness from :class:`SeededRng` and its
factorizations from :func:`svd` / :func:`solve_hermitian`.
"""

from __future__ import annotations

import numba
import numpy as np
import scipy.linalg

from .errors import InvalidInputError, NumericalFailure, ShapeError, SingularSystemError

_EPS = np.finfo(np.float64).eps


class SeededRng:
    """Reproducible random stream identified by ``(seed, stream)``.

    Backed by numpy's PCG64 seeded through ``SeedSequence([seed, stream])``,
    so identical pairs give identical draws on every platform numpy supports.
    A generator has a single owner; parallel work uses :meth:`spawn`.
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise InvalidInputError("seed and stream must be non-negative")
        self.seed = int(seed)
        self.stream = int(stream)
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream])))

    def spawn(self, stream: int) -> "SeededRng":
        """Independent generator for a sub-stream of the same seed."""
        return SeededRng(self.seed, self.stream * 1_000_003 + int(stream) + 1)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream})"


def crandn(rng: SeededRng, rows: int, cols: int) -> np.ndarray:
    """Circularly-symmetric CN(0, 1) matrix of shape ``(rows, cols)``."""
    if rows < 1 or cols < 1:
        raise InvalidInputError("rows and cols must be >= 1")
    z = rng.gen.standard_normal((rows, cols, 2))
    return (z[..., 0] + 1j * z[..., 1]) / np.sqrt(2.0)


@numba.njit(cache=True)
def _jacobi_sweeps(W, m, tol, tiny, max_sweeps):
    # Cyclic one-sided Jacobi on the rows of W. Row j holds column j of the
    # working matrix (first m entries) followed by column j of V, so every
    # rotation updates both. Returns the number of sweeps used, or -1.
    n, width = W.shape
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = W[p, 0] * 0.0
                for i in range(m):
                    x = W[p, i]
                    y = W[q, i]
                    alpha += (np.conj(x) * x).real
                    beta += (np.conj(y) * y).real
                    gamma += np.conj(x) * y
                mag = abs(gamma)
                if alpha <= tiny or beta <= tiny or mag <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * mag)
                t = 1.0 / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta < 0:
                    t = -t
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ph = np.conj(gamma) / mag
                for i in range(width):
                    x = W[p, i]
                    y = W[q, i] * ph
                    W[p, i] = c * x - s * y
                    W[q, i] = s * x + c * y
        if not rotated:
            return sweep + 1
    return -1


def _complete_basis(U: np.ndarray, good: np.ndarray) -> np.ndarray:
    # Replace the columns of U not flagged `good` with orthonormal vectors
    # orthogonal to the good ones (Gram-Schmidt over the standard basis).
    m = U.shape[0]
    basis = [U[:, k] for k in np.flatnonzero(good)]
    fill = np.flatnonzero(~good)
    out = U.copy()
    cand = 0
    for k in fill:
        while True:
            v = np.zeros(m, dtype=U.dtype)
            v[cand % m] = 1.0
            cand += 1
            for _ in range(2):
                for b in basis:
                    v = v - b * np.vdot(b, v)
            nv = np.linalg.norm(v)
            if nv > 0.5:
                v = v / nv
                break
            if cand > 4 * m:
                raise NumericalFailure("could not complete orthonormal basis")
        basis.append(v)
        out[:, k] = v
    return out


def svd(M, max_sweeps: int = 60):
    """Thin singular value decomposition by one-sided (Hestenes) Jacobi.

    Parameters
    ----------
    M : array_like, shape (m, n)
        Real or complex matrix. Real input yields real factors.
    max_sweeps : int
        Upper bound on full Jacobi sweeps before giving up.

    Returns
    -------
    U : ndarray, shape (m, k)
        Left singular vectors, ``k = min(m, n)``. The first entry of each
        column that is not numerically zero is real and nonnegative.
    S : ndarray, shape (k,)
        Singular values in descending order.
    V : ndarray, shape (n, k)
        Right singular vectors, so that ``M = U @ diag(S) @ V.conj().T``.

    Notes
    -----
    Column pairs are orthogonalized in cyclic order until a full sweep
    performs no rotation. Columns whose norm falls below ``n*eps*||M||``
    are treated as null directions and their left vectors are completed to
    an orthonormal set.
    """
    a = np.asarray(M)
    if a.ndim != 2:
        raise ShapeError(f"svd expects a 2-D matrix, got shape {a.shape}")
    if min(a.shape) < 1:
        raise InvalidInputError("svd needs min dimension >= 1")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("svd input contains non-finite entries")

    dtype = np.complex128 if np.iscomplexobj(a) else np.float64
    transposed = a.shape[0] < a.shape[1]
    A = np.array(a.conj().T if transposed else a, dtype=dtype)
    m, n = A.shape
    V = np.eye(n, dtype=dtype)

    norm_f = np.linalg.norm(A)
    if norm_f == 0.0:
        U = np.eye(m, n, dtype=dtype)
        S = np.zeros(n)
        return (V, S, U) if transposed else (U, S, V)

    tol = max(m, 8) * _EPS
    tiny = (n * _EPS * norm_f) ** 2
    W = np.ascontiguousarray(np.concatenate([A.T, V.T], axis=1))
    if _jacobi_sweeps(W, m, tol, tiny, max_sweeps) < 0:
        raise NumericalFailure(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    A = W[:, :m].T
    V = W[:, m:].T

    S = np.linalg.norm(A, axis=0)
    order = np.argsort(-S, kind="stable")
    S = S[order]
    A = A[:, order]
    V = V[:, order]
    good = S > np.sqrt(tiny)
    U = np.zeros_like(A)
    U[:, good] = A[:, good] / S[good]
    if not good.all():
        U = _complete_basis(U, good)

    if transposed:
        U, V = V, U
    for k in range(U.shape[1]):
        col = U[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size:
            lead = col[nz[0]]
            ph = np.conj(lead) / abs(lead)
            U[:, k] *= ph
            V[:, k] *= ph
    return U, S, V


def solve_hermitian(A, B) -> np.ndarray:
    """Solve ``A X = B`` for Hermitian positive-definite ``A`` via Cholesky.

    Raises :class:`SingularSystemError` when ``A`` is not numerically
    positive definite or the solve misses the residual bound
    ``||AX - B|| < 1e-9 ||B||``.
    """
    A = np.asarray(A)
    B = np.asarray(B)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"A must be square, got {A.shape}")
    if B.shape[0] != A.shape[0]:
        raise ShapeError(f"B has {B.shape[0]} rows, A is {A.shape[0]}x{A.shape[0]}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise InvalidInputError("solve_hermitian inputs must be finite")
    scale = max(1.0, np.abs(A).max())
    if np.abs(A - A.conj().T).max() > 1e-12 * scale:
        raise InvalidInputError("A is not Hermitian")
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("matrix is not positive definite") from exc
    X = scipy.linalg.cho_solve(factor, B, check_finite=False)
    nb = np.linalg.norm(B)
    if not np.all(np.isfinite(X)) or np.linalg.norm(A @ X - B) > 1e-9 * nb:
        raise SingularSystemError("Hermitian solve is numerically singular")
    return X
