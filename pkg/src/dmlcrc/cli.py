"""Command-line interface: ``dmlcrc cv | classify | gradcheck | synth``."""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import harness
from .dataset import FeatureMatrix, load_feature_table, normalize_columns
from .dml import DmlHyper
from .errors import ConfigError, DataError, DmlCrcError, NumericError

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_GRADCHECK = 4


def _exit_code(exc: DmlCrcError) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return EXIT_CONFIG


def _fail(exc: Exception) -> None:
    fold = getattr(exc, "fold", None)
    where = f" (fold {fold})" if fold is not None else ""
    click.echo(f"error{where}: {type(exc).__name__}: {exc}", err=True)
    code = _exit_code(exc) if isinstance(exc, DmlCrcError) else EXIT_DATA
    sys.exit(code)


def _emit(text: str, out: str | None) -> None:
    if out is None:
        click.echo(text, nl=False)
    else:
        Path(out).write_text(text)


def data_options(f):
    f = click.option("--header/--no-header", default=False, help="Feature file has a header row.")(f)
    f = click.option("--synth", default=None, metavar="d,c,n,sep,nuisance", help="Generate synthetic data instead.")(f)
    f = click.option("--features", type=click.Path(dir_okay=False), default=None, help="Feature table (label,f1,...,fd).")(f)
    return f


def model_options(f):
    opts = [
        click.option("--method", default="crc", type=click.Choice(harness.METHODS), show_default=True),
        click.option("--folds", default=5, type=int, show_default=True),
        click.option("--seed", default=42, type=int, show_default=True),
        click.option("--lambda", "lam", default=None, type=float, help="Ridge weight [default: 1e-3 * N / 700]."),
        click.option("--gamma", default=1.0, type=float, show_default=True, help="Metric regularizer."),
        click.option("--eta", default=1e-3, type=float, show_default=True, help="Feature-matrix step size."),
        click.option("--inner-iters", default=50, type=int, show_default=True),
        click.option("--inner-tol", default=1e-6, type=float, show_default=True),
        click.option("--eps-floor", default=1e-4, type=float, show_default=True, help="Metric eigenvalue floor."),
        click.option("--passes", default=1, type=int, show_default=True, help="Fine-tuning passes."),
        click.option("--residual-rule", default="mahalanobis", type=click.Choice(["mahalanobis", "euclidean"]), show_default=True),
        click.option(
            "--normalize/--no-normalize",
            default=True,
            show_default=True,
            help="Scale every sample to unit norm. Each sample is scaled by its own norm, "
            "so no statistic is shared between training and test folds.",
        ),
        click.option("--patch-len", default=None, type=int, help="PCRC window length [default: ceil(d/2)]."),
        click.option("--patch-stride", default=None, type=int, help="PCRC stride [default: patch-len // 2]."),
        click.option("--pooling", default="sum", type=click.Choice(["sum", "vote"]), show_default=True),
        click.option("--gamma-pro", default=1e-2, type=float, show_default=True, help="ProCRC discriminative weight."),
        click.option("--procrc-rule", default="discriminative", type=click.Choice(["discriminative", "residual"]), show_default=True),
        click.option("--threads", default=None, type=int, help="Concurrent folds [default: $DMLCRC_THREADS or cores]."),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def build_config(**kw) -> harness.RunConfig:
    try:
        hyper = DmlHyper(
            gamma=kw["gamma"],
            eps_floor=kw["eps_floor"],
            inner_max_iters=kw["inner_iters"],
            inner_tol=kw["inner_tol"],
            eta=kw["eta"],
            outer_passes=kw["passes"],
            residual_rule=kw["residual_rule"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    config = harness.RunConfig(
        method=kw["method"],
        features=Path(kw["features"]) if kw["features"] else None,
        synth=harness.SynthSpec.parse(kw["synth"]) if kw["synth"] else None,
        has_header=kw["header"],
        folds=kw["folds"],
        seed=kw["seed"],
        normalize=kw["normalize"],
        lam=kw["lam"],
        hyper=hyper,
        patch_len=kw["patch_len"],
        patch_stride=kw["patch_stride"],
        pooling=kw["pooling"],
        gamma_pro=kw["gamma_pro"],
        procrc_rule=kw["procrc_rule"],
        threads=kw["threads"],
    )
    config.validate()
    return config


@click.group()
def main():
    """Collaborative-representation classifiers with a learned Mahalanobis metric."""


@main.command()
@data_options
@model_options
@click.option("--out", default=None, type=click.Path(dir_okay=False), help="Write the CSV report here.")
def cv(out, **kw):
    """Stratified k-fold accuracy report as CSV."""
    try:
        report = harness.run_cv(build_config(**kw))
    except (DmlCrcError, OSError) as exc:
        _fail(exc)
    _emit(report.to_csv(), out)


@main.command()
@data_options
@model_options
@click.option("--queries", required=True, type=click.Path(dir_okay=False), help="Feature table of samples to label.")
@click.option("--out", default=None, type=click.Path(dir_okay=False))
def classify(queries, out, **kw):
    """Train on the full dataset and label every row of QUERIES.

    The label column of the query file is read but ignored. Output lines
    are ``row,label`` using the training file's original label values.
    """
    try:
        config = build_config(**kw)
        fm = config.load()
        qm = load_feature_table(queries, kw["header"])
        if qm.dim != fm.dim:
            raise ConfigError(f"queries have {qm.dim} features, training data has {fm.dim}")
        Y = qm.columns
        if config.normalize:
            fm = normalize_columns(fm)
            Y = normalize_columns(FeatureMatrix(Y, np.zeros(qm.count, dtype=int))).columns
        pred = harness.train_model(config, fm).predict(Y)
    except (DmlCrcError, OSError) as exc:
        _fail(exc)
    names = fm.label_values if fm.label_values is not None else np.arange(fm.classes)
    lines = ["row,label"] + [f"{i},{names[p]}" for i, p in enumerate(pred)]
    _emit("\n".join(lines) + "\n", out)


@main.command()
@click.option("--seed", default=42, type=int, show_default=True)
@click.option("--method", default="dml-crc", type=click.Choice(["dml-crc"]), show_default=True)
def gradcheck(seed, method):
    """Compare the analytic feature gradient with finite differences."""
    result = harness.gradcheck(seed)
    click.echo(result.summary())
    if not result.passed:
        sys.exit(EXIT_GRADCHECK)


@main.command()
@click.option("--synth", required=True, metavar="d,c,n,sep,nuisance")
@click.option("--seed", default=42, type=int, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--header/--no-header", default=False)
def synth(synth, seed, out, header):
    """Write a synthetic feature table."""
    try:
        harness.emit_synth(harness.SynthSpec.parse(synth), seed, out, header)
    except (DmlCrcError, OSError) as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
