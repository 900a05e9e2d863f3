"""Cross-validation benchmark, gradient check and synthetic-data emission."""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .crc import CrcModel, default_lambda
from .dataset import (
    FeatureMatrix,
    kfold_split,
    load_feature_table,
    make_rng,
    normalize_columns,
    synthesize,
    write_feature_table,
)
from .dml import DmlHyper, MetricState, data_term, fine_tune, grad_X
from .errors import ConfigError, DmlCrcError
from .numerics import DEFAULT_FD_STEP, finite_diff_grad
from .variants import (
    POOLING_RULES,
    PROCRC_RULES,
    DmlProCrcModel,
    PatchScheme,
    PcrcModel,
    ProCrcModel,
    ProCrcParams,
    procrc_objective_factory,
)

METHODS = ("crc", "pcrc", "procrc", "dml-crc", "dml-procrc")
THREADS_ENV = "DMLCRC_THREADS"
GRADCHECK_TOL = 1e-5


@dataclass(frozen=True)
class SynthSpec:
    d: int
    c: int
    n_per_class: int
    separation: float
    nuisance_scale: float

    @classmethod
    def parse(cls, text: str) -> SynthSpec:
        """Parse ``d,c,n,separation,nuisance``."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 5:
            raise ConfigError(f"--synth expects d,c,n,sep,nuisance; got {text!r}")
        try:
            return cls(int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3]), float(parts[4]))
        except ValueError as exc:
            raise ConfigError(f"bad --synth value {text!r}: {exc}") from None

    def generate(self, seed: int) -> FeatureMatrix:
        try:
            return synthesize(seed, self.d, self.c, self.n_per_class, self.separation, self.nuisance_scale)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class RunConfig:
    """Everything a benchmark run depends on.

    ``lam=None`` picks the CRC default for the training-fold size and is
    shared by every method. ``hyper.lam`` is ignored in favour of ``lam``.
    """

    method: str = "crc"
    features: Path | None = None
    synth: SynthSpec | None = None
    has_header: bool = False
    folds: int = 5
    seed: int = 42
    normalize: bool = True
    lam: float | None = None
    hyper: DmlHyper = field(default_factory=DmlHyper)
    patch_len: int | None = None
    patch_stride: int | None = None
    pooling: str = "sum"
    gamma_pro: float = 1e-2
    procrc_rule: str = "discriminative"
    threads: int | None = None

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if (self.features is None) == (self.synth is None):
            raise ConfigError("exactly one of features / synth must be given")
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.pooling not in POOLING_RULES:
            raise ConfigError(f"pooling must be one of {', '.join(POOLING_RULES)}")
        if self.procrc_rule not in PROCRC_RULES:
            raise ConfigError(f"procrc rule must be one of {', '.join(PROCRC_RULES)}")
        if self.gamma_pro < 0:
            raise ConfigError("gamma-pro must be non-negative")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be positive")

    def load(self) -> FeatureMatrix:
        self.validate()
        if self.synth is not None:
            return self.synth.generate(self.seed)
        return load_feature_table(self.features, self.has_header)

    def echo(self) -> dict:
        out = asdict(self)
        out["features"] = None if self.features is None else str(self.features)
        return out


def resolve_threads(requested: int | None = None) -> int:
    if requested is not None:
        return requested
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        if value < 1:
            raise ConfigError(f"{THREADS_ENV} must be positive")
        return value
    return os.cpu_count() or 1


def patch_scheme(config: RunConfig, d: int) -> PatchScheme:
    patch_len = config.patch_len or max(1, math.ceil(d / 2))
    stride = config.patch_stride or max(1, patch_len // 2)
    return PatchScheme(patch_len, stride)


def train_model(config: RunConfig, X: FeatureMatrix):
    """Fit the configured method on a training partition.

    The returned object exposes ``predict(Y)`` over query columns. The DML
    methods fine-tune leave-one-out: every training sample is presented as
    a query against the remaining training columns.
    """
    lam = default_lambda(X.count) if config.lam is None else config.lam
    method = config.method
    if method == "crc":
        return CrcModel(X, lam)
    if method == "pcrc":
        return PcrcModel(X, patch_scheme(config, X.dim), lam, config.pooling)
    params = ProCrcParams(lam, config.gamma_pro, X.classes, config.procrc_rule)
    if method == "procrc":
        return ProCrcModel(X, params)

    hyper = replace(config.hyper, lam=lam)
    queries = [(X.columns[:, j], int(X.labels[j])) for j in range(X.count)]
    factory = procrc_objective_factory(config.gamma_pro) if method == "dml-procrc" else None
    model = fine_tune(X, queries, hyper, MetricState.identity(X.dim), factory,
                      leave_out=list(range(X.count)))
    if method == "dml-crc":
        return model
    return DmlProCrcModel(model, params)


@dataclass
class CvReport:
    method: str
    seed: int
    accuracies: list[float]
    hyper: dict = field(default_factory=dict, repr=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "fold", "accuracy"])
        for f, acc in enumerate(self.accuracies):
            w.writerow([self.method, f, f"{acc:.6f}"])
        w.writerow([self.method, "mean", f"{self.mean:.6f}"])
        return buf.getvalue()


def parse_report_csv(text: str) -> tuple[str, list[float], float]:
    """Inverse of ``CvReport.to_csv``: ``(method, fold accuracies, mean)``."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["method", "fold", "accuracy"]:
        raise ValueError("missing report header")
    folds, mean, method = [], None, None
    for m, fold, acc in rows[1:]:
        method = m
        if fold == "mean":
            mean = float(acc)
        else:
            if int(fold) != len(folds):
                raise ValueError(f"fold rows out of order at {fold}")
            folds.append(float(acc))
    if mean is None:
        raise ValueError("missing mean row")
    return method, folds, mean


def run_cv(
    config: RunConfig,
    data: FeatureMatrix | None = None,
    observer: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
) -> CvReport:
    """Stratified k-fold evaluation of one method.

    Columns are unit-normalized independently (when enabled), so no
    statistic crosses from a test fold into training. ``observer`` is
    called with ``(fold, train_index, test_index)`` before each fold runs.
    """
    config.validate()
    fm = config.load() if data is None else data
    plan = kfold_split(fm, config.folds, config.seed)

    def one_fold(f: int) -> float:
        train, test = plan.train_index(f), plan.test_index(f)
        if observer is not None:
            observer(f, train, test)
        try:
            X = fm.subset(train)
            Y = fm.columns[:, test]
            if config.normalize:
                X = normalize_columns(X)
                Y = normalize_columns(FeatureMatrix(Y, np.zeros(len(test), dtype=int))).columns
            pred = train_model(config, X).predict(Y)
        except DmlCrcError as exc:
            # keep the original type so callers can map it to an exit code
            exc.fold = f
            raise
        return float(np.mean(pred == fm.labels[test]))

    threads = min(resolve_threads(config.threads), config.folds)
    if threads == 1:
        accuracies = [one_fold(f) for f in range(config.folds)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accuracies = list(pool.map(one_fold, range(config.folds)))
    return CvReport(config.method, config.seed, accuracies, config.echo())


@dataclass
class GradcheckResult:
    errors: list[float]
    tol: float = GRADCHECK_TOL

    @property
    def max_error(self) -> float:
        return max(self.errors)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} gradcheck: {len(self.errors)} instances, max relative error {self.max_error:.3e} (tol {self.tol:.0e})"


def gradcheck(
    seed: int = 42,
    instances: int = 20,
    h: float = DEFAULT_FD_STEP,
    grad_fn: Callable = grad_X,
    tol: float = GRADCHECK_TOL,
) -> GradcheckResult:
    """Compare ``grad_fn`` against central differences of the data term.

    Instances are random with d <= 8 and N <= 16; the first one has
    ``alpha = 0`` so both sides vanish. The relative error is the Frobenius
    norm of the difference over that of the finite-difference gradient
    (zero when both are zero).
    """
    rng = make_rng(seed)
    errors = []
    for i in range(instances):
        d = int(rng.integers(2, 9))
        n = int(rng.integers(2, 17))
        X = rng.standard_normal((d, n)) / np.sqrt(d)
        y = rng.standard_normal(d) / np.sqrt(d)
        alpha = np.zeros(n) if i == 0 else rng.standard_normal(n) / np.sqrt(n)
        M = rng.standard_normal((d, d))
        metric = MetricState(M @ M.T / d + 0.5 * np.eye(d))
        analytic = grad_fn(X, y, alpha, metric)
        numeric = finite_diff_grad(lambda Z: data_term(Z, y, alpha, metric), X, h)
        diff = np.linalg.norm(analytic - numeric)
        scale = np.linalg.norm(numeric)
        errors.append(float(diff / scale) if scale > 0 else float(diff))
    return GradcheckResult(errors, tol)


def emit_synth(spec: SynthSpec, seed: int, out_path: str | Path, header: bool = False) -> FeatureMatrix:
    """Write a synthetic dataset as a feature table and return it."""
    fm = spec.generate(seed)
    write_feature_table(fm, out_path, header)
    return fm
