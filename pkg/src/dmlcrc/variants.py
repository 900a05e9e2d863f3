"""Patch-based CRC, probabilistic CRC, and ProCRC coding under a learned metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .crc import CrcModel, RidgeCoder, argmin_class, class_residuals, default_lambda
from .dataset import FeatureMatrix
from .dml import DmlHyper, DmlModel, MetricState
from .errors import AllInfinite, DimensionMismatch, InvalidScheme, NotPositiveDefinite, SingularSystem
from .numerics import SpdFactor

POOLING_RULES = ("sum", "vote")
PROCRC_RULES = ("discriminative", "residual")


@dataclass(frozen=True)
class PatchScheme:
    patch_len: int
    stride: int = 1

    def starts(self, d: int) -> list[int]:
        """Window start offsets for a length-``d`` vector.

        Windows step by ``stride``; if the last regular window stops short of
        ``d`` one more window ending exactly at ``d`` is appended. With
        ``stride > patch_len`` interior coordinates fall between windows.
        """
        if self.patch_len < 1 or self.stride < 1:
            raise InvalidScheme("patch_len and stride must be positive")
        if self.patch_len > d:
            raise InvalidScheme(f"patch_len={self.patch_len} exceeds d={d}")
        starts = list(range(0, d - self.patch_len + 1, self.stride))
        if starts[-1] + self.patch_len < d:
            starts.append(d - self.patch_len)
        return starts

    def windows(self, d: int) -> list[slice]:
        return [slice(s, s + self.patch_len) for s in self.starts(d)]


def extract_patches(v, scheme: PatchScheme) -> list[np.ndarray]:
    v = np.asarray(v, dtype=float)
    return [v[w] for w in scheme.windows(v.shape[0])]


class PcrcModel:
    """One CRC model per patch window, each over the matching rows of X.

    ``skipped`` counts patches dropped because every class residual was
    infinite for that patch.
    """

    def __init__(self, X: FeatureMatrix, scheme: PatchScheme, lam: float | None = None,
                 pooling: str = "sum"):
        if pooling not in POOLING_RULES:
            raise ValueError(f"pooling must be one of {POOLING_RULES}")
        self.X = X
        self.scheme = scheme
        self.pooling = pooling
        self.windows = scheme.windows(X.dim)
        self.models = [CrcModel(X.with_columns(X.columns[w]), lam) for w in self.windows]
        self.lam = self.models[0].lam
        self.skipped = 0

    def scores(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.X.dim,):
            raise DimensionMismatch(f"query has shape {y.shape}, expected ({self.X.dim},)")
        total = np.zeros(self.X.classes)
        used = 0
        for w, model in zip(self.windows, self.models):
            yj = y[w]
            r = model.residuals(model.encode(yj), yj)
            if np.all(np.isinf(r)):
                self.skipped += 1
                continue
            used += 1
            if self.pooling == "sum":
                total = total + r
            else:
                total[argmin_class(r)] -= 1.0
        if used == 0:
            raise AllInfinite("every patch produced infinite residuals")
        return total

    def classify(self, y) -> int:
        return argmin_class(self.scores(y))

    def predict(self, Y) -> np.ndarray:
        return np.array([self.classify(y) for y in np.asarray(Y, dtype=float).T], dtype=np.int64)


def pcrc_classify(X: FeatureMatrix, y, scheme: PatchScheme, lam: float | None = None,
                  pooling: str = "sum") -> int:
    return PcrcModel(X, scheme, lam, pooling).classify(y)


@dataclass(frozen=True)
class ProCrcParams:
    lam: float | None = None
    gamma_pro: float = 1e-2
    K: int | None = None
    rule: str = "discriminative"

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.gamma_pro < 0:
            raise ValueError("gamma_pro must be non-negative")
        if self.rule not in PROCRC_RULES:
            raise ValueError(f"rule must be one of {PROCRC_RULES}")

    def check(self, X: FeatureMatrix) -> None:
        if self.K is not None and self.K != X.classes:
            raise DimensionMismatch(f"K={self.K} but the dictionary has {X.classes} classes")


def _discriminative_gram(WG: np.ndarray, fm: FeatureMatrix) -> np.ndarray:
    """``sum_k (I - D_k) G (I - D_k)`` for a Gram-like matrix G."""
    out = np.zeros_like(WG)
    for idx in fm.class_index:
        keep = np.ones(fm.count, dtype=bool)
        keep[idx] = False
        out[np.ix_(keep, keep)] += WG[np.ix_(keep, keep)]
    return out


class ProCrcCoder:
    """Exact minimizer of the ProCRC objective, optionally metric-weighted.

        ||y - X a||_W^2 + lam ||a||^2 + (gamma / K) sum_k ||X a - X_k a_k||_W^2

    with ``||v||_W^2 = v^T sigma^{-1} v`` (identity when no metric is given).
    The normal matrix is assembled once per dictionary and factored. When the
    discriminative term vanishes (``gamma == 0`` or a single class) the plain
    ridge coder is used so results coincide exactly with CRC coding.
    """

    def __init__(self, X: FeatureMatrix, lam: float, gamma_pro: float, metric: MetricState | None = None):
        self.X = X
        self.lam = lam
        self.gamma_pro = gamma_pro
        self.metric = metric
        self.reduced = gamma_pro == 0 or X.classes == 1
        sigma = None if metric is None else metric.sigma
        factor = None if metric is None else metric.factor
        if self.reduced:
            self.ridge = RidgeCoder(X.columns, lam, sigma, factor)
            return
        cols = X.columns
        self.WX = cols if metric is None else metric.factor.solve(cols)
        gram = cols.T @ self.WX
        G = gram + lam * np.eye(X.count) + (gamma_pro / X.classes) * _discriminative_gram(gram, X)
        try:
            self.factor = SpdFactor(G)
        except NotPositiveDefinite as exc:
            raise SingularSystem(f"ProCRC system is singular: {exc}") from None

    def encode(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.X.dim,):
            raise DimensionMismatch(f"query has shape {y.shape}, expected ({self.X.dim},)")
        if self.reduced:
            return self.ridge.encode(y)
        return self.factor.solve(self.WX.T @ y)


def procrc_objective(X: FeatureMatrix, y, alpha, lam: float, gamma_pro: float,
                     metric: MetricState | None = None) -> float:
    """Value of the (optionally metric-weighted) ProCRC objective."""
    y = np.asarray(y, dtype=float)
    alpha = np.asarray(alpha, dtype=float)

    def sq(v):
        return float(v @ v) if metric is None else metric.factor.quad(v)

    full = X.columns @ alpha
    value = sq(y - full) + lam * float(alpha @ alpha)
    if gamma_pro:
        value += gamma_pro / X.classes * sum(
            sq(full - X.columns[:, idx] @ alpha[idx]) for idx in X.class_index
        )
    return value


def discriminative_scores(X: FeatureMatrix, alpha, metric: MetricState | None = None) -> np.ndarray:
    """``||X a - X_k a_k||^2`` per class (metric-weighted if given)."""
    full = X.columns @ alpha
    out = np.empty(X.classes)
    for k, idx in enumerate(X.class_index):
        v = full - X.columns[:, idx] @ alpha[idx]
        out[k] = v @ v if metric is None else metric.factor.quad(v)
    return out


class ProCrcModel:
    def __init__(self, X: FeatureMatrix, params: ProCrcParams):
        params.check(X)
        self.X = X
        self.params = params
        self.lam = default_lambda(X.count) if params.lam is None else params.lam
        self.coder = ProCrcCoder(X, self.lam, params.gamma_pro)

    def encode(self, y) -> np.ndarray:
        return self.coder.encode(y)

    def classify(self, y) -> int:
        y = np.asarray(y, dtype=float)
        alpha = self.encode(y)
        if self.params.rule == "discriminative":
            return argmin_class(discriminative_scores(self.X, alpha))
        return argmin_class(class_residuals(self.X, alpha, y))

    def predict(self, Y) -> np.ndarray:
        return np.array([self.classify(y) for y in np.asarray(Y, dtype=float).T], dtype=np.int64)


def procrc_encode(X: FeatureMatrix, y, params: ProCrcParams) -> np.ndarray:
    return ProCrcModel(X, params).encode(y)


def procrc_classify(X: FeatureMatrix, y, params: ProCrcParams) -> int:
    return ProCrcModel(X, params).classify(y)


class ProCrcObjective:
    """ProCRC coding and cost under a metric, for ``dml.alternate``."""

    def __init__(self, hyper: DmlHyper, gamma_pro: float):
        self.hyper = hyper
        self.gamma_pro = gamma_pro

    def encode(self, X: FeatureMatrix, y, metric: MetricState) -> np.ndarray:
        return ProCrcCoder(X, self.hyper.lam, self.gamma_pro, metric).encode(y)

    def cost(self, X: FeatureMatrix, y, alpha, metric: MetricState) -> float:
        return (
            procrc_objective(X, y, alpha, self.hyper.lam, self.gamma_pro, metric)
            + self.hyper.gamma * float(np.sum(metric.sigma**2))
        )


def procrc_objective_factory(gamma_pro: float):
    """Objective factory for ``dml.fine_tune`` that learns sigma under ProCRC coding."""
    return lambda hyper: ProCrcObjective(hyper, gamma_pro)


class DmlProCrcModel:
    """ProCRC coding and decision with the data and discriminative terms metric-weighted.

    ``params.rule == "residual"`` swaps the discriminative decision for the
    class-residual rule of the underlying ``DmlModel``.
    """

    def __init__(self, model: DmlModel, params: ProCrcParams):
        params.check(model.X)
        self.model = model
        self.params = params
        self.lam = model.hyper.lam if params.lam is None else params.lam
        self.coder = ProCrcCoder(model.X, self.lam, params.gamma_pro, model.metric)

    def encode(self, y) -> np.ndarray:
        return self.coder.encode(y)

    def classify(self, y) -> int:
        y = np.asarray(y, dtype=float)
        alpha = self.encode(y)
        metric = self.model.metric
        if self.params.rule == "discriminative":
            return argmin_class(discriminative_scores(self.model.X, alpha, metric))
        factor = metric.factor if self.model.hyper.residual_rule == "mahalanobis" else None
        return argmin_class(class_residuals(self.model.X, alpha, y, factor))

    def predict(self, Y) -> np.ndarray:
        return np.array([self.classify(y) for y in np.asarray(Y, dtype=float).T], dtype=np.int64)


def dml_procrc_classify(model: DmlModel, y, params: ProCrcParams) -> int:
    return DmlProCrcModel(model, params).classify(y)
