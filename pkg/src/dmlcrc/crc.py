"""Baseline collaborative representation classifier.

A query ``y`` is coded over every training column with a ridge penalty,

    alpha = argmin ||y - X alpha||^2 + lam ||alpha||^2 = (X^T X + lam I)^{-1} X^T y,

and assigned to the class whose own columns and coefficients reconstruct it
with the smallest normalized residual ``||y - X_i alpha_i||^2 / ||alpha_i||^2``.
"""

from __future__ import annotations

import numpy as np

from .dataset import FeatureMatrix
from .errors import AllInfinite, DimensionMismatch, NotPositiveDefinite, SingularGram
from .numerics import SpdFactor

ZERO_COEF_THRESHOLD = 1e-24


def default_lambda(n_samples: int) -> float:
    return 1e-3 * n_samples / 700.0


class RidgeCoder:
    """Solves ``(X^T W X + lam I) alpha = X^T W y`` with ``W = sigma^{-1}``.

    With ``lam > 0`` and fewer features than samples the d x d form
    ``alpha = X^T (X X^T + lam sigma)^{-1} y`` is factored instead, which is
    the same solution by the push-through identity. ``sigma=None`` means the
    identity metric. Both paths perform the same floating point operations
    whether sigma is omitted or is exactly the identity.
    """

    def __init__(self, X: np.ndarray, lam: float, sigma=None, sigma_factor=None):
        if lam < 0:
            raise ValueError(f"lambda must be non-negative, got {lam}")
        d, n = X.shape
        self.X = X
        self.lam = float(lam)
        self.dual = lam > 0 and d < n
        if self.dual:
            reg = np.eye(d) if sigma is None else sigma
            gram = X @ X.T + self.lam * reg
        else:
            if lam == 0 and n > d:
                raise SingularGram(f"lambda=0 with N={n} > d={d} makes the Gram matrix singular")
            WX = X if sigma_factor is None else sigma_factor.solve(X)
            gram = X.T @ WX + self.lam * np.eye(n)
        try:
            self.factor = SpdFactor(gram)
        except NotPositiveDefinite as exc:
            raise SingularGram(f"coding system is singular: {exc}") from None
        self.sigma_factor = sigma_factor

    def encode(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.X.shape[0],):
            raise DimensionMismatch(f"query has shape {y.shape}, expected ({self.X.shape[0]},)")
        if self.dual:
            return self.X.T @ self.factor.solve(y)
        Wy = y if self.sigma_factor is None else self.sigma_factor.solve(y)
        return self.factor.solve(self.X.T @ Wy)


def class_residuals(fm: FeatureMatrix, alpha: np.ndarray, y: np.ndarray, metric_factor=None) -> np.ndarray:
    """Per-class ``dist(y, X_i alpha_i) / ||alpha_i||^2``.

    ``dist`` is the squared Euclidean norm, or the Mahalanobis form
    ``r^T sigma^{-1} r`` when a factor of sigma is given. Classes whose
    coefficient slice is (numerically) zero score ``+inf``.
    """
    alpha = np.asarray(alpha, dtype=float)
    y = np.asarray(y, dtype=float)
    if alpha.shape != (fm.count,):
        raise DimensionMismatch(f"alpha has shape {alpha.shape}, expected ({fm.count},)")
    if y.shape != (fm.dim,):
        raise DimensionMismatch(f"query has shape {y.shape}, expected ({fm.dim},)")
    out = np.empty(fm.classes)
    for i, idx in enumerate(fm.class_index):
        a = alpha[idx]
        den = a @ a
        if den < ZERO_COEF_THRESHOLD:
            out[i] = np.inf
            continue
        r = y - fm.columns[:, idx] @ a
        num = r @ r if metric_factor is None else metric_factor.quad(r)
        out[i] = num / den
    return out


def argmin_class(scores: np.ndarray) -> int:
    """Index of the smallest score; ties go to the smallest index."""
    if np.all(np.isinf(scores)):
        raise AllInfinite("every class residual is infinite")
    return int(np.argmin(scores))


class CrcModel:
    """Training dictionary plus a cached factorization of its ridge system."""

    def __init__(self, X: FeatureMatrix, lam: float | None = None):
        self.X = X
        self.lam = default_lambda(X.count) if lam is None else float(lam)
        self.coder = RidgeCoder(X.columns, self.lam)

    @property
    def gram_factor(self) -> SpdFactor:
        return self.coder.factor

    def encode(self, y) -> np.ndarray:
        return self.coder.encode(y)

    def residuals(self, alpha, y) -> np.ndarray:
        return class_residuals(self.X, alpha, y)

    def classify(self, y) -> int:
        return argmin_class(self.residuals(self.encode(y), y))

    def predict(self, Y: np.ndarray) -> np.ndarray:
        """Classify every column of ``Y``."""
        return np.array([self.classify(y) for y in np.asarray(Y, dtype=float).T], dtype=np.int64)


def fit(X: FeatureMatrix, lam: float | None = None) -> CrcModel:
    return CrcModel(X, lam)
