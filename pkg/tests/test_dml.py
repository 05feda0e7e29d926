import json

import numpy as np
import pytest

from covidsem.dml import (
    DmlSpec,
    cluster_folds,
    cv_lambda,
    dml_arrays,
    dml_fit,
    lambda_grid,
    lasso,
    orthogonal_theta,
)
from covidsem.errors import ConfigError, NumericalError
from covidsem.estimator import fit_design, ols
from covidsem.models import reduced_spec
from covidsem.transform import TransformOptions, build_design


def _orthonormal(n=200, p=6, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, p))
    A -= A.mean(axis=0)
    Q, _ = np.linalg.qr(A)
    X = np.sqrt(n) * Q
    y = X @ np.array([1.0, -0.5, 0.2, 0.05, 0.0, -0.8]) + rng.standard_normal(n) + 3.0
    return y, X


@pytest.mark.parametrize("lam", [0.0, 0.03, 0.1, 0.4, 1.5])
def test_orthonormal_soft_threshold(lam):
    y, X = _orthonormal()
    n = y.size
    z = X.T @ (y - y.mean()) / n
    want = np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)
    fit = lasso(y, X, lam)
    assert np.max(np.abs(fit.coef - want)) < 1e-8
    assert fit.intercept == pytest.approx(y.mean() - X.mean(axis=0) @ want, abs=1e-8)


def test_lambda_max_gives_zero_and_zero_gives_ols():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((150, 8)) * rng.uniform(0.1, 10, 8)
    X[:, 1] += 0.8 * X[:, 0]
    y = X @ rng.standard_normal(8) + rng.standard_normal(150)
    top = lambda_grid(y, X)[0]
    assert np.all(lasso(y, X, top).coef == 0)
    assert np.all(lasso(y, X, top * 1.5).coef == 0)
    assert np.any(lasso(y, X, top * 0.9).coef != 0)
    fit = lasso(y, X, 0.0)
    ref = ols(y, np.column_stack([np.ones(150), X])).coefficients
    assert fit.intercept == pytest.approx(ref[0], abs=1e-9)
    assert np.allclose(fit.coef, ref[1:], rtol=1e-9, atol=1e-10)


def test_unpenalized_block_and_constant_column():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((100, 4))
    X[:, 3] = 5.0
    y = 2 * X[:, 0] + rng.standard_normal(100)
    fit = lasso(y, X, 10.0, penalty_factor=[0, 1, 1, 1])
    assert fit.coef[1] == 0 and fit.coef[2] == 0 and fit.coef[3] == 0
    assert fit.coef[0] == pytest.approx(ols(y, np.column_stack([np.ones(100), X[:, 0]])).coefficients[1], abs=1e-10)


def test_non_convergence_reports_sweeps():
    rng = np.random.default_rng(3)
    base = rng.standard_normal((80, 1))
    X = base + 0.01 * rng.standard_normal((80, 6))
    y = X @ np.arange(1.0, 7.0) + rng.standard_normal(80)
    with pytest.raises(NumericalError, match="after 1 coordinate sweeps"):
        lasso(y, X, 1e-4, max_sweeps=1)
    with pytest.raises(ConfigError):
        lasso(y, X, -1.0)


def test_cv_lambda_cases():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((200, 5))
    y = X[:, 0] + rng.standard_normal(200)
    folds = cluster_folds(np.repeat(np.arange(20), 10), 5)
    assert cv_lambda(y, X, folds, [0.37]) == 0.37
    assert cv_lambda(y, X, folds, [0.0]) == 0.0
    with pytest.raises(ConfigError):
        cv_lambda(y, X, folds, [])


def test_cv_lambda_pure_noise_picks_large_penalty():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((400, 10))
        y = rng.standard_normal(400)
        folds = cluster_folds(np.repeat(np.arange(40), 10), 5, seed)
        grid = lambda_grid(y, X)
        assert cv_lambda(y, X, folds, grid) >= grid[4]


def test_cv_lambda_ties_go_to_larger():
    # every candidate at or above the all-zero bound gives the same predictions
    rng = np.random.default_rng(5)
    X = rng.standard_normal((100, 3))
    y = X[:, 0] + rng.standard_normal(100)
    folds = cluster_folds(np.repeat(np.arange(10), 10), 5)
    top = max(lambda_grid(y[folds != f], X[folds != f])[0] for f in range(5))
    assert cv_lambda(y, X, folds, [top * 2, top * 3]) == top * 3


def test_folds_partition_clusters():
    clusters = np.repeat(np.arange(23), 7)
    f = cluster_folds(clusters, 5, seed=3)
    for g in range(23):
        assert np.unique(f[clusters == g]).size == 1
    assert sorted(np.unique(f)) == [0, 1, 2, 3, 4]
    counts = np.bincount([f[clusters == g][0] for g in range(23)])
    assert counts.max() - counts.min() <= 1
    assert np.array_equal(f, cluster_folds(clusters, 5, seed=3))
    with pytest.raises(ConfigError):
        cluster_folds(clusters, 1)
    with pytest.raises(ConfigError):
        cluster_folds(clusters, 24)


def _plm(rng, G=40, T=20, p=15, theta=-0.1):
    n = G * T
    cl = np.repeat(np.arange(G), T)
    W = rng.standard_normal((n, p))
    X = rng.standard_normal((n, 2))
    g = W @ (0.5 / np.arange(1, p + 1))
    m = W @ (0.4 / np.arange(1, p + 1)[::-1])
    D = m + 0.3 * X[:, 0] + rng.standard_normal(n)
    y = theta * D + 0.2 * X[:, 0] - 0.1 * X[:, 1] + g + rng.standard_normal(n) + np.repeat(rng.standard_normal(G) * 0.3, T)
    return y, D, X, W, cl


def test_every_row_scored_once_and_deterministic():
    y, D, X, W, cl = _plm(np.random.default_rng(6))
    a = dml_arrays(y, D, X, W, cl, DmlSpec("d", folds=4), seed=2)
    b = dml_arrays(y, D, X, W, cl, DmlSpec("d", folds=4), seed=2)
    assert a.theta == b.theta and a.se == b.se
    assert np.all(np.isfinite(a.y_residual)) and np.all(np.isfinite(a.d_residual))
    assert sum(info["n_test"] for info in a.nuisance) == y.size
    assert len(a.fold_of_state) == 40 and set(a.fold_of_state.values()) == {0, 1, 2, 3}
    json.loads(a.to_json())


def test_degenerate_target_rejected():
    y, D, X, W, cl = _plm(np.random.default_rng(7))
    with pytest.raises(NumericalError, match="degenerate"):
        dml_arrays(y, X[:, 0] * 2.0, X, W, cl, DmlSpec("d", lam=0.0, cross_fit=False))


def test_random_forest_not_implemented():
    y, D, X, W, cl = _plm(np.random.default_rng(8))
    with pytest.raises(NotImplementedError):
        dml_arrays(y, D, X, W, cl, DmlSpec("d", learner="random_forest"))


def test_spec_validation():
    with pytest.raises(ConfigError):
        DmlSpec("d", x_columns=("d",))
    with pytest.raises(ConfigError):
        DmlSpec("d", x_columns=("a",), w_columns=("a",))
    with pytest.raises(ConfigError):
        DmlSpec("d", learner="boosting")
    s = DmlSpec("d", x_columns=("a",), grid=(0.1, 0.01))
    assert DmlSpec.from_dict(s.to_dict()) == s


@pytest.fixture(scope="module")
def synth_design(synth):
    opts = TransformOptions(window=tuple(synth.truth["window"]))
    return build_design(synth.panel, reduced_spec("cases"), options=opts)


def test_collapses_to_ols(synth_design):
    ref = fit_design(synth_design).coef("mask_employees")
    res = dml_fit(synth_design, DmlSpec("mask_employees", w_columns=(), lam=0.0, cross_fit=False))
    assert res.theta == pytest.approx(ref, rel=1e-10, abs=1e-12)


def test_default_split_on_synthetic_design(synth_design):
    spec = DmlSpec("stay_at_home")
    d, x, w = spec.resolve(synth_design)
    names = synth_design.names
    assert names[d] == "stay_at_home"
    assert "test_growth" in [names[j] for j in x] and "own_growth" in [names[j] for j in x]
    assert "const" not in [names[j] for j in x + w]
    assert all(synth_design.blocks[j] == "confounder" for j in w)
    res = dml_fit(synth_design, spec, seed=1)
    truth = 7 * -0.025
    assert abs(res.theta - truth) < 0.25 * abs(truth)


def test_neyman_orthogonality_smoke():
    # with OLS nuisances the residuals are orthogonal to (X, W), so a nuisance
    # shift along any W direction moves theta only at second order
    y, D, X, W, cl = _plm(np.random.default_rng(9))
    res = dml_arrays(y, D, X, W, cl, DmlSpec("d", lam=0.0, cross_fit=False))
    u, v = W[:, 0], W[:, 1] - W[:, 2]
    base = res.theta
    ratios = []
    for eps in (1e-1, 1e-2, 1e-3):
        th = orthogonal_theta(res.y_residual - eps * u, res.d_residual - eps * v)
        ratios.append(abs(th - base) / eps)
    assert ratios[1] < 0.2 * ratios[0] and ratios[2] < 0.2 * ratios[1]
    # a non-orthogonal moment (raw D instead of its residual) moves at first order
    naive = [abs(orthogonal_theta(y - eps * u, D) - orthogonal_theta(y, D)) / eps for eps in (1e-2, 1e-3)]
    assert naive[1] > 0.5 * naive[0]


@pytest.mark.slow
def test_monte_carlo_coverage_two_se():
    hit = []
    for r in range(200):
        y, D, X, W, cl = _plm(np.random.default_rng([7, r]))
        res = dml_arrays(y, D, X, W, cl, DmlSpec("d"), seed=r)
        hit.append(abs(res.theta + 0.1) <= 2 * res.se)
    assert np.mean(hit) >= 0.90
