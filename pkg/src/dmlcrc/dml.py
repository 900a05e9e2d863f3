"""Collaborative representation with a learned Mahalanobis metric.

The objective for a query ``y`` over dictionary ``X`` is

    J(alpha, sigma) = (y - X alpha)^T sigma^{-1} (y - X alpha)
                      + lam ||alpha||^2 + gamma ||sigma||_F^2.

``alternate`` minimizes it by interleaving a metric step and an exact
coefficient step; ``fine_tune`` wraps that in passes over a query stream and
moves the dictionary along the gradient of the data term.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

from .crc import RidgeCoder, argmin_class, class_residuals, default_lambda
from .dataset import FeatureMatrix
from .errors import DimensionMismatch, Diverged, NonFinite
from .numerics import SpdFactor, spd_project, symmetrize

# Called with every MetricState right after construction. Tests register
# eigenvalue-floor checks here.
METRIC_HOOKS: list[Callable[["MetricState"], None]] = []

RESIDUAL_RULES = ("mahalanobis", "euclidean")


@dataclass(frozen=True, eq=False)
class MetricState:
    """SPD metric ``sigma`` together with its Cholesky factor."""

    sigma: np.ndarray
    factor: SpdFactor = field(init=False, repr=False)

    def __post_init__(self):
        sigma = symmetrize(self.sigma)
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "factor", SpdFactor(sigma))
        for hook in METRIC_HOOKS:
            hook(self)

    @classmethod
    def identity(cls, d: int) -> MetricState:
        return cls(np.eye(d))

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]


@dataclass(frozen=True)
class DmlHyper:
    """Regularization weights and loop control for metric learning.

    ``lam`` of ``None`` resolves to the CRC default for the dictionary size.
    ``damping`` is the weight of the new rank-one candidate in the metric
    step. ``learn_metric=False`` freezes sigma at its initial value.
    """

    lam: float | None = None
    gamma: float = 1.0
    eps_floor: float = 1e-4
    inner_max_iters: int = 50
    inner_tol: float = 1e-6
    eta: float = 1e-3
    outer_passes: int = 1
    damping: float = 0.5
    learn_metric: bool = True
    residual_rule: str = "mahalanobis"

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.gamma < 0 or (self.learn_metric and self.gamma == 0):
            raise ValueError("gamma must be positive (zero only with learn_metric=False)")
        if not self.eps_floor > 0:
            raise ValueError("eps_floor must be positive")
        if not self.inner_tol > 0:
            raise ValueError("inner_tol must be positive")
        if self.inner_max_iters < 1 or self.outer_passes < 1:
            raise ValueError("iteration counts must be positive")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.residual_rule not in RESIDUAL_RULES:
            raise ValueError(f"residual_rule must be one of {RESIDUAL_RULES}")

    def resolved(self, n_samples: int) -> DmlHyper:
        if self.lam is not None:
            return self
        return replace(self, lam=default_lambda(n_samples))


def _check(X: FeatureMatrix, y: np.ndarray, alpha=None, metric=None) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != (X.dim,):
        raise DimensionMismatch(f"query has shape {y.shape}, expected ({X.dim},)")
    if alpha is not None and np.shape(alpha) != (X.count,):
        raise DimensionMismatch(f"alpha has shape {np.shape(alpha)}, expected ({X.count},)")
    if metric is not None and metric.dim != X.dim:
        raise DimensionMismatch(f"metric is {metric.dim}x{metric.dim}, features have d={X.dim}")
    return y


def data_term(X: np.ndarray, y: np.ndarray, alpha: np.ndarray, metric: MetricState) -> float:
    """``(y - X alpha)^T sigma^{-1} (y - X alpha)`` on a raw matrix."""
    return metric.factor.quad(y - X @ alpha)


def cost(X: FeatureMatrix, y, alpha, metric: MetricState, hyper: DmlHyper) -> float:
    y = _check(X, y, alpha, metric)
    alpha = np.asarray(alpha, dtype=float)
    lam = hyper.resolved(X.count).lam
    value = (
        data_term(X.columns, y, alpha, metric)
        + lam * (alpha @ alpha)
        + hyper.gamma * np.sum(metric.sigma**2)
    )
    if not np.isfinite(value):
        raise NonFinite("cost evaluated to a non-finite value")
    return float(value)


def update_alpha(X: FeatureMatrix, y, metric: MetricState, lam: float) -> np.ndarray:
    """Exact minimizer of J over alpha with sigma held fixed."""
    y = _check(X, y, metric=metric)
    return RidgeCoder(X.columns, lam, metric.sigma, metric.factor).encode(y)


def update_sigma(
    X: FeatureMatrix,
    y,
    alpha,
    metric_prev: MetricState,
    gamma: float,
    eps_floor: float,
    damping: float = 0.5,
) -> MetricState:
    """One damped fixed-point step toward ``sigma^{-1} r r^T sigma^{-1} / (2 gamma)``.

    The candidate is rank one, so it is blended with the previous metric and
    projected back onto matrices with eigenvalues at least ``eps_floor``.
    """
    y = _check(X, y, alpha, metric_prev)
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    r = y - X.columns @ np.asarray(alpha, dtype=float)
    w = metric_prev.factor.solve(r)
    candidate = np.outer(w, w) / (2.0 * gamma)
    blended = (1.0 - damping) * metric_prev.sigma + damping * candidate
    return MetricState(spd_project(blended, eps_floor))


class CrcObjective:
    """Coding step and cost for the plain metric-weighted ridge objective."""

    def __init__(self, hyper: DmlHyper):
        self.hyper = hyper

    def encode(self, X: FeatureMatrix, y, metric: MetricState) -> np.ndarray:
        return update_alpha(X, y, metric, self.hyper.lam)

    def cost(self, X: FeatureMatrix, y, alpha, metric: MetricState) -> float:
        return cost(X, y, alpha, metric, self.hyper)


@dataclass
class AlternationResult:
    """Output of ``alternate``.

    ``trace[0]`` is the cost after the initial coefficient step and
    ``trace[t]`` the cost after the t-th coefficient step. ``pre_alpha[t-1]``
    is the cost at the t-th metric, evaluated before that coefficient step,
    so ``trace[t] <= pre_alpha[t-1]`` always holds.
    """

    alpha: np.ndarray
    metric: MetricState
    trace: list[float]
    pre_alpha: list[float]

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1


def alternate(
    X: FeatureMatrix,
    y,
    hyper: DmlHyper,
    metric_init: MetricState | None = None,
    objective=None,
) -> AlternationResult:
    """Alternate metric and coefficient updates until the cost settles.

    Stops when the relative cost change falls below ``hyper.inner_tol`` or
    after ``hyper.inner_max_iters`` rounds. ``objective`` supplies
    ``encode``/``cost``; it defaults to the metric-weighted CRC objective.
    """
    hyper = hyper.resolved(X.count)
    metric = MetricState.identity(X.dim) if metric_init is None else metric_init
    y = _check(X, y, metric=metric)
    if objective is None:
        objective = CrcObjective(hyper)

    alpha = objective.encode(X, y, metric)
    prev = objective.cost(X, y, alpha, metric)
    trace, pre_alpha = [prev], []
    for _ in range(hyper.inner_max_iters):
        if hyper.learn_metric:
            metric = update_sigma(
                X, y, alpha, metric, hyper.gamma, hyper.eps_floor, hyper.damping
            )
        pre_alpha.append(objective.cost(X, y, alpha, metric))
        alpha = objective.encode(X, y, metric)
        current = objective.cost(X, y, alpha, metric)
        trace.append(current)
        if abs(current - prev) / max(prev, 1e-30) < hyper.inner_tol:
            break
        prev = current
    return AlternationResult(alpha, metric, trace, pre_alpha)


def grad_X(X: FeatureMatrix | np.ndarray, y, alpha, metric: MetricState) -> np.ndarray:
    """Gradient of the data term with respect to the dictionary.

    ``d/dX (y - X alpha)^T sigma^{-1} (y - X alpha) = -2 sigma^{-1} (y - X alpha) alpha^T``.
    """
    cols = X.columns if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if y.shape != (cols.shape[0],) or alpha.shape != (cols.shape[1],) or metric.dim != cols.shape[0]:
        raise DimensionMismatch("grad_X received inconsistent shapes")
    w = metric.factor.solve(y - cols @ alpha)
    return -2.0 * np.outer(w, alpha)


@dataclass(eq=False)
class DmlModel:
    """A (possibly fine-tuned) dictionary with its learned metric."""

    X: FeatureMatrix
    hyper: DmlHyper
    metric: MetricState
    history: list[dict] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.hyper = self.hyper.resolved(self.X.count)
        if self.metric.dim != self.X.dim:
            raise DimensionMismatch("metric dimension differs from feature dimension")

    @cached_property
    def coder(self) -> RidgeCoder:
        return RidgeCoder(self.X.columns, self.hyper.lam, self.metric.sigma, self.metric.factor)

    def encode(self, y) -> np.ndarray:
        return self.coder.encode(y)

    def residuals(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        alpha = self.encode(y)
        factor = self.metric.factor if self.hyper.residual_rule == "mahalanobis" else None
        return class_residuals(self.X, alpha, y, factor)

    def classify(self, y) -> int:
        return argmin_class(self.residuals(y))

    def predict(self, Y: np.ndarray) -> np.ndarray:
        return np.array([self.classify(y) for y in np.asarray(Y, dtype=float).T], dtype=np.int64)


def classify_dml(model: DmlModel, y) -> int:
    return model.classify(y)


def fine_tune(
    X0: FeatureMatrix,
    queries: Iterable[tuple[np.ndarray, int]],
    hyper: DmlHyper,
    metric_init: MetricState | None = None,
    objective_factory: Callable[[DmlHyper], object] | None = None,
    leave_out: Sequence[int | None] | None = None,
) -> DmlModel:
    """Learn the metric over a query stream and step the dictionary.

    For every pass and every query: run ``alternate`` warm-started from the
    current metric, then ``X <- X - eta * grad_X``. Labels are not used by
    the update; they are only echoed into the per-query ``history`` records
    alongside the inner iteration count and final cost.

    ``leave_out[q]``, when not None, names a dictionary column hidden from
    query ``q``: it is excluded from the coding and receives no gradient.
    This lets the dictionary's own samples serve as queries.
    """
    hyper = hyper.resolved(X0.count)
    queries = list(queries)
    if leave_out is not None and len(leave_out) != len(queries):
        raise DimensionMismatch("leave_out must have one entry per query")
    objective = CrcObjective(hyper) if objective_factory is None else objective_factory(hyper)
    metric = MetricState.identity(X0.dim) if metric_init is None else metric_init
    cols = X0.columns
    history = []
    for p in range(hyper.outer_passes):
        for q, (y, label) in enumerate(queries):
            hidden = None if leave_out is None else leave_out[q]
            if hidden is None:
                keep = slice(None)
                D = X0.with_columns(cols)
            else:
                keep = np.delete(np.arange(X0.count), hidden)
                D = FeatureMatrix(cols[:, keep], X0.labels[keep], X0.classes, X0.label_values)
            y = _check(D, y, metric=metric)
            try:
                result = alternate(D, y, hyper, metric, objective)
            except NonFinite as exc:
                raise Diverged(f"non-finite values at pass {p}, query {q}; reduce eta") from exc
            metric = result.metric
            history.append(
                {"pass": p, "query": q, "label": int(label),
                 "iterations": result.iterations, "cost": result.trace[-1]}
            )
            if hyper.eta == 0:
                continue
            cols = cols.copy()
            cols[:, keep] -= hyper.eta * grad_X(D, y, result.alpha, metric)
            if not np.all(np.isfinite(cols)):
                raise Diverged(
                    f"dictionary became non-finite at pass {p}, query {q}; reduce eta"
                )
    return DmlModel(X0.with_columns(cols), hyper, metric, history)
