"""Feature tables, column normalization, synthetic data and stratified folds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ClassTooSmall,
    DimensionMismatch,
    EmptyFile,
    NonFinite,
    ParseError,
    RaggedRows,
    ZeroColumn,
)


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the bit stream is fixed across platforms for a seed."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """A d x N matrix with one training sample per column and a class label each.

    ``label_values`` keeps the original label of each dense class index when
    the matrix was loaded from a file with sparse labels.
    """

    columns: np.ndarray
    labels: np.ndarray
    n_classes: int | None = None
    label_values: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        cols = np.array(self.columns, dtype=float)
        if cols.ndim != 2:
            raise DimensionMismatch(f"columns must be 2-D, got shape {cols.shape}")
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != cols.shape[1]:
            raise DimensionMismatch(
                f"{labels.shape[0]} labels for {cols.shape[1]} columns"
            )
        if cols.shape[1] == 0 or cols.shape[0] == 0:
            raise DimensionMismatch("feature matrix must be non-empty")
        if not np.all(np.isfinite(cols)):
            raise NonFinite("feature matrix contains non-finite entries")
        c = int(labels.max()) + 1 if self.n_classes is None else int(self.n_classes)
        if labels.min() < 0 or labels.max() >= c:
            raise ValueError(f"labels must lie in [0, {c})")
        counts = np.bincount(labels, minlength=c)
        if np.any(counts == 0):
            missing = int(np.flatnonzero(counts == 0)[0])
            raise ValueError(f"class {missing} has no samples")
        cols.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "n_classes", c)
        if self.label_values is None:
            object.__setattr__(self, "label_values", np.arange(c))

    @property
    def dim(self) -> int:
        return self.columns.shape[0]

    @property
    def count(self) -> int:
        return self.columns.shape[1]

    @property
    def classes(self) -> int:
        return self.n_classes

    @cached_property
    def class_index(self) -> list[np.ndarray]:
        """Column indices of each class, in original column order."""
        return [np.flatnonzero(self.labels == i) for i in range(self.n_classes)]

    @cached_property
    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def class_block(self, i: int) -> np.ndarray:
        return self.columns[:, self.class_index[i]]

    def subset(self, idx: Sequence[int]) -> FeatureMatrix:
        """Columns ``idx`` as a new matrix over the same class set."""
        idx = np.asarray(idx)
        return FeatureMatrix(
            self.columns[:, idx], self.labels[idx], self.n_classes, self.label_values
        )

    def with_columns(self, columns: np.ndarray) -> FeatureMatrix:
        return FeatureMatrix(columns, self.labels, self.n_classes, self.label_values)


@dataclass(frozen=True, eq=False)
class FoldPlan:
    k: int
    assignments: np.ndarray

    def test_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)


def _parse_float(token: str, row: int, column: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"cannot parse {token!r} as a number", row, column) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value {token!r}", row, column)
    return value


def load_feature_table(path: str | Path, has_header: bool = False) -> FeatureMatrix:
    """Read a ``label,f1,...,fd`` text file, one sample per line.

    Labels are remapped to ``0..c-1`` following the sorted order of the
    original values. Blank lines are ignored; rows and columns in error
    messages are 1-based file positions.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    start = 1 if has_header and lines else 0
    raw_labels: list[int] = []
    rows: list[list[float]] = []
    width = None
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        tokens = line.split(",")
        if len(tokens) < 2:
            raise ParseError("expected a label and at least one feature", lineno)
        if width is None:
            width = len(tokens)
        elif len(tokens) != width:
            raise RaggedRows(
                f"expected {width - 1} features, found {len(tokens) - 1}", lineno
            )
        try:
            raw_labels.append(int(tokens[0]))
        except ValueError:
            raise ParseError(f"label {tokens[0]!r} is not an integer", lineno, 1) from None
        rows.append([_parse_float(t, lineno, j) for j, t in enumerate(tokens[1:], start=2)])
    if not rows:
        raise EmptyFile(f"{path} contains no samples")
    label_values, labels = np.unique(np.array(raw_labels), return_inverse=True)
    columns = np.array(rows, dtype=float).T
    return FeatureMatrix(columns, labels, len(label_values), label_values)


def format_feature_rows(fm: FeatureMatrix, header: bool = False) -> list[str]:
    out = []
    if header:
        out.append(",".join(["label"] + [f"f{j + 1}" for j in range(fm.dim)]))
    for j in range(fm.count):
        label = fm.label_values[fm.labels[j]]
        values = ",".join(format(v, ".17g") for v in fm.columns[:, j])
        out.append(f"{label},{values}")
    return out


def write_feature_table(fm: FeatureMatrix, path: str | Path, header: bool = False) -> None:
    """Write ``fm`` so that ``load_feature_table`` recovers it bit-exactly."""
    Path(path).write_text("\n".join(format_feature_rows(fm, header)) + "\n", encoding="utf-8")


def normalize_columns(fm: FeatureMatrix) -> FeatureMatrix:
    """Scale every column to unit Euclidean norm."""
    norms = np.linalg.norm(fm.columns, axis=0)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroColumn(int(zero[0]))
    return fm.with_columns(fm.columns / norms)


def synthesize(
    seed: int,
    d: int,
    c: int,
    n_per_class: int,
    separation: float,
    nuisance_scale: float,
) -> FeatureMatrix:
    """Gaussian classes with an anisotropic nuisance block.

    Class ``i`` has mean ``separation * e_(i mod d)``. The first ``ceil(d/2)``
    coordinates carry unit-variance noise; the remaining ones carry noise of
    standard deviation ``nuisance_scale``. Columns are grouped by class.
    """
    if d < 2:
        raise ValueError("d must be at least 2")
    if c < 1 or n_per_class < 1:
        raise ValueError("c and n_per_class must be positive")
    if separation < 0 or nuisance_scale < 0:
        raise ValueError("separation and nuisance_scale must be non-negative")
    rng = make_rng(seed)
    n = c * n_per_class
    scale = np.ones(d)
    scale[math.ceil(d / 2):] = nuisance_scale
    noise = rng.standard_normal((d, n)) * scale[:, None]
    labels = np.repeat(np.arange(c), n_per_class)
    means = np.zeros((d, c))
    means[np.arange(c) % d, np.arange(c)] = separation
    return FeatureMatrix(means[:, labels] + noise, labels, c)


def kfold_split(fm: FeatureMatrix, k: int, seed: int) -> FoldPlan:
    """Stratified k-fold assignment.

    Within each class the samples are shuffled and dealt round-robin. The
    deal continues where the previous class stopped, which keeps the total
    fold sizes balanced as well.
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    for i, size in enumerate(fm.class_sizes):
        if size < k:
            raise ClassTooSmall(i, int(size), k)
    rng = make_rng(seed)
    assignments = np.empty(fm.count, dtype=np.int64)
    offset = 0
    for idx in fm.class_index:
        shuffled = rng.permutation(idx)
        assignments[shuffled] = (offset + np.arange(len(idx))) % k
        offset = (offset + len(idx)) % k
    return FoldPlan(k, assignments)
