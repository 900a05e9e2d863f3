"""Dense linear-algebra kernels: SPD solves, SPD projection, finite differences.

Symmetric matrices are plain ``ndarray`` objects; every function here that
returns one stores it exactly symmetrized (``S[i, j] == S[j, i]``).
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy import linalg

from .errors import DimensionMismatch, NonFinite, NotPositiveDefinite

JITTER_SCALE = 1e-10
DEFAULT_FD_STEP = 1e-5


def symmetrize(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return (M + M.T) / 2.0


def _check_square(A: np.ndarray, name: str = "matrix") -> None:
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {A.shape}")


class SpdFactor:
    """Cached Cholesky factorization of a symmetric positive-definite matrix.

    If the plain factorization hits a non-positive pivot, one retry is made
    with ``1e-10 * trace(A) / n`` added to the diagonal. ``jittered`` records
    whether that happened.
    """

    def __init__(self, A: np.ndarray):
        A = np.asarray(A, dtype=float)
        _check_square(A)
        if not np.all(np.isfinite(A)):
            raise NonFinite("matrix to factor contains non-finite entries")
        self.matrix = A
        self.order = A.shape[0]
        self.jittered = False
        try:
            self._cf = linalg.cho_factor(A, lower=True, check_finite=False)
        except linalg.LinAlgError:
            jitter = JITTER_SCALE * np.trace(A) / self.order
            if not jitter > 0:
                raise NotPositiveDefinite("matrix has non-positive trace") from None
            try:
                self._cf = linalg.cho_factor(
                    A + jitter * np.eye(self.order), lower=True, check_finite=False
                )
            except linalg.LinAlgError:
                raise NotPositiveDefinite(
                    "Cholesky factorization failed even after diagonal jitter"
                ) from None
            self.jittered = True

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.order:
            raise DimensionMismatch(
                f"right-hand side has {b.shape[0]} rows, expected {self.order}"
            )
        return linalg.cho_solve(self._cf, b, check_finite=False)

    def quad(self, r: np.ndarray) -> float:
        """``r^T A^{-1} r`` for a vector ``r``."""
        return float(r @ self.solve(r))


def solve_spd(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive-definite ``A``."""
    A = np.asarray(A, dtype=float)
    _check_square(A)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != A.shape[0]:
        raise DimensionMismatch(f"len(b)={b.shape[0]} but A is {A.shape[0]}x{A.shape[0]}")
    return SpdFactor(A).solve(b)


def spd_project(M: np.ndarray, floor: float) -> np.ndarray:
    """Symmetrize ``M`` and clamp its eigenvalues from below at ``floor``.

    Returns ``V diag(max(w, floor)) V^T`` where ``(w, V)`` is the
    eigendecomposition of ``(M + M^T) / 2``.
    """
    M = np.asarray(M, dtype=float)
    _check_square(M)
    if not floor > 0:
        raise ValueError(f"floor must be positive, got {floor}")
    if not np.all(np.isfinite(M)):
        raise NonFinite("matrix to project contains non-finite entries")
    w, V = np.linalg.eigh(symmetrize(M))
    S = (V * np.maximum(w, floor)) @ V.T
    return symmetrize(S)


def min_eigenvalue(S: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(symmetrize(S))[0])


def finite_diff_grad(
    f: Callable[[np.ndarray], float], X0: np.ndarray, h: float = DEFAULT_FD_STEP
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix.

    ``G[i, j] = (f(X0 + h E_ij) - f(X0 - h E_ij)) / (2 h)``.
    """
    X0 = np.asarray(X0, dtype=float)
    G = np.empty_like(X0)
    X = X0.copy()
    for idx in np.ndindex(X0.shape):
        X[idx] = X0[idx] + h
        f_plus = f(X)
        X[idx] = X0[idx] - h
        f_minus = f(X)
        X[idx] = X0[idx]
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFinite(f"function is non-finite near entry {idx}")
        G[idx] = (f_plus - f_minus) / (2.0 * h)
    return G
