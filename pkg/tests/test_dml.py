import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmlcrc import dml
from dmlcrc.crc import fit as crc_fit
from dmlcrc.dataset import FeatureMatrix
from dmlcrc.dml import (
    DmlHyper,
    DmlModel,
    MetricState,
    alternate,
    classify_dml,
    cost,
    data_term,
    fine_tune,
    grad_X,
    update_alpha,
    update_sigma,
)
from dmlcrc.errors import DimensionMismatch, Diverged
from dmlcrc.numerics import finite_diff_grad, min_eigenvalue, spd_project

from conftest import random_fm, random_spd


@pytest.fixture
def floor_hook():
    """Assert the eigenvalue floor on every metric built while active."""
    seen = []

    def install(eps):
        def hook(m):
            assert min_eigenvalue(m.sigma) >= eps - 1e-12
            seen.append(m)

        dml.METRIC_HOOKS.append(hook)
        return seen

    yield install
    dml.METRIC_HOOKS.clear()


def test_hyper_validation():
    with pytest.raises(ValueError):
        DmlHyper(gamma=0.0)
    DmlHyper(gamma=0.0, learn_metric=False)
    with pytest.raises(ValueError):
        DmlHyper(eps_floor=0)
    with pytest.raises(ValueError):
        DmlHyper(residual_rule="cosine")


def test_cost_zero_residual(rng):
    fm = random_fm(rng, 4, 3, 2)
    alpha = rng.standard_normal(6)
    y = fm.columns @ alpha
    h = DmlHyper(lam=0.0, gamma=0.0, learn_metric=False)
    assert cost(fm, y, alpha, MetricState.identity(4), h) == pytest.approx(0.0, abs=1e-24)


def test_cost_euclidean_reduction(rng):
    fm = random_fm(rng, 5, 3, 2)
    alpha, y = rng.standard_normal(6), rng.standard_normal(5)
    h = DmlHyper(lam=0.3, gamma=0.0, learn_metric=False)
    r = y - fm.columns @ alpha
    assert cost(fm, y, alpha, MetricState.identity(5), h) == pytest.approx(r @ r + 0.3 * alpha @ alpha, rel=1e-14)


def test_cost_term_by_term(rng):
    fm = random_fm(rng, 5, 3, 3)
    alpha, y = rng.standard_normal(9), rng.standard_normal(5)
    S = random_spd(rng, 5)
    h = DmlHyper(lam=0.2, gamma=0.7)
    r = y - fm.columns @ alpha
    expected = r @ np.linalg.inv(S) @ r + 0.2 * np.sum(alpha**2) + 0.7 * np.trace(S.T @ S)
    assert cost(fm, y, alpha, MetricState(S), h) == pytest.approx(expected, rel=1e-12)


def test_cost_dimension_mismatch(rng):
    fm = random_fm(rng, 5, 3, 3)
    with pytest.raises(DimensionMismatch):
        cost(fm, np.ones(5), np.ones(4), MetricState.identity(5), DmlHyper(lam=1.0))
    with pytest.raises(DimensionMismatch):
        cost(fm, np.ones(5), np.ones(9), MetricState.identity(4), DmlHyper(lam=1.0))


@pytest.mark.parametrize("d, n", [(6, 4), (12, 2), (3, 5)])
def test_update_alpha_identity_matches_crc(rng, d, n):
    fm = random_fm(rng, d, n, 3)
    y = rng.standard_normal(d)
    lam = 0.05
    np.testing.assert_allclose(
        update_alpha(fm, y, MetricState.identity(d), lam), crc_fit(fm, lam).encode(y), rtol=0, atol=1e-12
    )


def test_update_alpha_scalar_metric_rescales_lambda(rng):
    fm = random_fm(rng, 6, 4, 3)
    y = rng.standard_normal(6)
    lam = 0.1
    X = fm.columns
    oracle = np.linalg.solve(X.T @ X + 4 * lam * np.eye(12), X.T @ y)
    np.testing.assert_allclose(update_alpha(fm, y, MetricState(4 * np.eye(6)), lam), oracle, atol=1e-10)


def test_update_alpha_beats_random_competitors(rng):
    fm = random_fm(rng, 6, 4, 3)
    y = rng.standard_normal(6)
    metric = MetricState(random_spd(rng, 6))
    h = DmlHyper(lam=0.1)
    a = update_alpha(fm, y, metric, 0.1)
    best = cost(fm, y, a, metric, h)
    for _ in range(100):
        other = a + rng.standard_normal(12) * rng.choice([1e-4, 1e-2, 1.0])
        assert best <= cost(fm, y, other, metric, h) + 1e-10


@pytest.mark.parametrize("d, n", [(6, 4), (12, 2)])
def test_update_alpha_stationarity(rng, d, n):
    fm = random_fm(rng, d, n, 3)
    y = rng.standard_normal(d)
    y /= np.linalg.norm(y)
    S = random_spd(rng, d)
    lam = 1e-2
    a = update_alpha(fm, y, MetricState(S), lam)
    X = fm.columns
    grad = -2 * X.T @ np.linalg.solve(S, y - X @ a) + 2 * lam * a
    assert np.max(np.abs(grad)) <= 1e-8


def test_update_sigma_zero_residual(rng):
    fm = random_fm(rng, 4, 2, 2)
    alpha = rng.standard_normal(4)
    y = fm.columns @ alpha
    prev = MetricState(random_spd(rng, 4))
    out = update_sigma(fm, y, alpha, prev, 1.0, 1e-3)
    np.testing.assert_allclose(out.sigma, spd_project(0.5 * prev.sigma, 1e-3), atol=1e-12)


def test_update_sigma_rank_one_hand_case():
    d = 4
    fm = FeatureMatrix(np.eye(d), np.arange(d))
    y = np.eye(d)[0]
    out = update_sigma(fm, y, np.zeros(d), MetricState.identity(d), 0.5, 1e-4)
    np.testing.assert_allclose(out.sigma, np.diag([1.0, 0.5, 0.5, 0.5]), atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([1e-4, 1e-2, 0.3]), st.floats(1e-3, 10.0))
def test_update_sigma_respects_floor(seed, eps, gamma):
    rng = np.random.default_rng(seed)
    fm = random_fm(rng, 5, 2, 3)
    out = update_sigma(fm, rng.standard_normal(5), rng.standard_normal(6),
                       MetricState(random_spd(rng, 5)), gamma, eps)
    assert min_eigenvalue(out.sigma) >= eps - 1e-12


def test_alternate_single_iteration(rng):
    fm = random_fm(rng, 5, 3, 2)
    res = alternate(fm, rng.standard_normal(5), DmlHyper(lam=0.1, inner_max_iters=1))
    assert len(res.trace) == 2
    assert len(res.pre_alpha) == 1


def test_alternate_exact_representation(rng):
    fm = random_fm(rng, 12, 2, 3)  # N=6 < d: independent columns
    alpha0 = rng.standard_normal(6)
    y = fm.columns @ alpha0
    h = DmlHyper(lam=1e-12, gamma=0.5)
    res = alternate(fm, y, h)
    assert res.trace[-1] <= h.gamma * np.sum(res.metric.sigma**2) + 1e-6


def test_alternate_trace_property(rng, floor_hook):
    h = DmlHyper(lam=0.1, gamma=0.2, inner_tol=1e-8, eps_floor=1e-3)
    floor_hook(h.eps_floor)
    fm = random_fm(rng, 6, 4, 3)
    res = alternate(fm, rng.standard_normal(6), h)
    for before, after in zip(res.pre_alpha, res.trace[1:]):
        assert after <= before + 1e-12


def test_alternate_stops_on_tolerance(rng):
    fm = random_fm(rng, 6, 4, 3)
    h = DmlHyper(lam=0.1, learn_metric=False, inner_max_iters=50)
    res = alternate(fm, rng.standard_normal(6), h)
    assert res.iterations == 1


def test_grad_zero_alpha(rng):
    fm = random_fm(rng, 4, 2, 2)
    G = grad_X(fm, rng.standard_normal(4), np.zeros(4), MetricState(random_spd(rng, 4)))
    assert np.array_equal(G, np.zeros((4, 4)))


def test_grad_scalar_by_hand():
    G = grad_X(np.array([[1.0]]), np.array([2.0]), np.array([1.0]), MetricState.identity(1))
    assert G.tolist() == [[-2.0]]


@pytest.mark.parametrize("seed", range(5))
def test_grad_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((5, 9))
    y, alpha = rng.standard_normal(5), rng.standard_normal(9)
    metric = MetricState(random_spd(rng, 5))
    G = grad_X(X, y, alpha, metric)
    ref = finite_diff_grad(lambda Z: data_term(Z, y, alpha, metric), X, 1e-5)
    assert np.linalg.norm(G - ref) / np.linalg.norm(ref) <= 1e-5


def _queries(fm):
    return [(fm.columns[:, j], int(fm.labels[j])) for j in range(fm.count)]


def test_fine_tune_eta_zero_is_identity(rng):
    fm = random_fm(rng, 6, 4, 3)
    q = random_fm(rng, 6, 2, 3)
    model = fine_tune(fm, _queries(q), DmlHyper(lam=0.1, eta=0.0, inner_max_iters=3))
    assert np.array_equal(model.X.columns, fm.columns)
    assert not np.array_equal(model.metric.sigma, np.eye(6))


def test_fine_tune_single_step_replay(rng):
    fm = random_fm(rng, 6, 4, 3)
    y = rng.standard_normal(6)
    h = DmlHyper(lam=0.1, eta=0.05, inner_max_iters=1)
    model = fine_tune(fm, [(y, 0)], h)
    res = alternate(fm, y, h)
    expected = fm.columns - 0.05 * grad_X(fm, y, res.alpha, res.metric)
    assert np.array_equal(model.X.columns, expected)
    assert np.array_equal(model.metric.sigma, res.metric.sigma)


def test_fine_tune_deterministic(rng):
    fm = random_fm(rng, 6, 4, 3)
    q = _queries(random_fm(rng, 6, 3, 3))
    h = DmlHyper(lam=0.1, eta=0.01, outer_passes=2)
    a, b = fine_tune(fm, q, h), fine_tune(fm, q, h)
    assert np.array_equal(a.X.columns, b.X.columns)
    assert np.array_equal(a.metric.sigma, b.metric.sigma)


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_fine_tune_diverges_loudly(rng):
    fm = random_fm(rng, 4, 3, 2)
    q = _queries(random_fm(rng, 4, 3, 2))
    with pytest.raises(Diverged):
        fine_tune(fm, q * 20, DmlHyper(lam=1e-3, eta=1e300, eps_floor=1e-8, gamma=1e-6))


def test_fine_tune_floor_hook(rng, floor_hook):
    h = DmlHyper(lam=0.05, eta=0.01, eps_floor=1e-3, outer_passes=2)
    seen = floor_hook(h.eps_floor)
    fm = random_fm(rng, 5, 4, 2)
    fine_tune(fm, _queries(random_fm(rng, 5, 3, 2)), h)
    assert len(seen) > 10


def test_classify_identity_metric_matches_crc(rng):
    for _ in range(20):
        fm = random_fm(rng, 6, 5, 3)
        lam = 0.01
        model = DmlModel(fm, DmlHyper(lam=lam), MetricState.identity(6))
        crc = crc_fit(fm, lam)
        for y in rng.standard_normal((10, 6)):
            assert classify_dml(model, y) == crc.classify(y)


def test_classify_self_match(rng):
    fm = random_fm(rng, 12, 2, 4)
    model = DmlModel(fm, DmlHyper(lam=1e-12), MetricState(random_spd(rng, 12)))
    j = int(fm.class_index[2][0])
    assert classify_dml(model, fm.columns[:, j]) == 2


def test_classify_euclidean_rule_flag(rng):
    fm = random_fm(rng, 6, 5, 3)
    S = random_spd(rng, 6)
    a = DmlModel(fm, DmlHyper(lam=0.01, residual_rule="euclidean"), MetricState(S))
    b = DmlModel(fm, DmlHyper(lam=0.01), MetricState(S))
    y = rng.standard_normal(6)
    alpha = a.encode(y)
    r = y - fm.columns[:, fm.labels == 0] @ alpha[fm.labels == 0]
    assert a.residuals(y)[0] == pytest.approx(r @ r / np.sum(alpha[fm.labels == 0] ** 2), rel=1e-12)
    assert b.residuals(y)[0] == pytest.approx(r @ np.linalg.solve(S, r) / np.sum(alpha[fm.labels == 0] ** 2), rel=1e-10)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.permutations(range(3)))
def test_classify_permutation_stable(seed, perm):
    rng = np.random.default_rng(seed)
    fm = random_fm(rng, 5, 3, 3)
    perm = np.array(perm)
    metric = MetricState(random_spd(rng, 5))
    h = DmlHyper(lam=0.02)
    relabeled = FeatureMatrix(fm.columns, perm[fm.labels], 3)
    y = rng.standard_normal(5)
    assert classify_dml(DmlModel(relabeled, h, metric), y) == perm[classify_dml(DmlModel(fm, h, metric), y)]


def test_frozen_metric_pipeline_reproduces_crc(rng):
    fm = random_fm(rng, 8, 6, 4)
    h = DmlHyper(lam=0.01, learn_metric=False, eta=0.0)
    queries = _queries(random_fm(rng, 8, 3, 4))
    model = fine_tune(fm, queries, h)
    crc = crc_fit(fm, 0.01)
    Y = rng.standard_normal((8, 50))
    assert np.array_equal(model.predict(Y), crc.predict(Y))
