import numpy as np
import pytest
from hypothesis import given, strategies as st

from featuretriage.gmm import DiagonalGMM, fit_gmm, impute, responsibilities


def random_gmm(rng, n, dim, spread=2.0):
    w = rng.dirichlet(np.ones(n))
    mu = rng.normal(scale=spread, size=(n, dim))
    var = rng.uniform(0.2, 1.5, size=(n, dim))
    return DiagonalGMM(w, mu, var)


def mc_conditional_mean(gmm, mask, x_obs, rng, n=10 ** 6):
    """Importance-weighted Monte-Carlo estimate of E[x_u | x_p] and its standard
    error, sampling from the joint and weighting by the observed-block density
    of the component each sample came from."""
    X, z = gmm.sample(n, rng)
    cols = np.flatnonzero(mask)
    mu, var = gmm.means[z][:, cols], gmm.variances[z][:, cols]
    logw = -0.5 * np.sum((x_obs - mu) ** 2 / var + np.log(var), axis=1)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    U = X[:, ~mask]
    est = w @ U
    # delta-method standard error of a self-normalized estimator
    se = np.sqrt(np.sum((w[:, None] * (U - est)) ** 2, axis=0))
    return est, se


def test_single_component_moments():
    X = np.random.default_rng(0).random((50, 3))
    g = fit_gmm(X, 1)
    np.testing.assert_allclose(g.means[0], X.mean(axis=0), atol=1e-9)
    np.testing.assert_allclose(g.variances[0], X.var(axis=0), atol=1e-9)


def test_well_separated_clusters():
    rng = np.random.default_rng(1)
    centers = np.array([[0.1, 0.1], [0.9, 0.8]])
    X = np.vstack([c + 0.01 * rng.standard_normal((100, 2)) for c in centers])
    g = fit_gmm(X, 2, seed=3)
    found = g.means[np.argsort(g.means[:, 0])]
    np.testing.assert_allclose(found, centers, atol=0.05)


@given(st.integers(0, 10 ** 6))
def test_em_monotone_and_invariants(seed):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(loc=rng.normal(size=3), size=(30, 3)) for _ in range(3)])
    g = fit_gmm(X, 3, seed=seed)
    assert np.all(np.diff(g.ll_trace) >= -1e-9)
    assert abs(g.weights.sum() - 1) < 1e-9
    assert g.variances.min() >= g.var_floor


def test_errors_and_collapse_warning():
    with pytest.raises(ValueError):
        fit_gmm(np.zeros((0, 2)), 1)
    with pytest.raises(ValueError):
        fit_gmm(np.zeros((2, 2)), 3)
    g = fit_gmm(np.vstack([np.zeros((5, 2)), np.ones((5, 2))]), 2)
    assert g.variances.min() >= 1e-4
    assert g.warnings


def test_single_component_imputation_ignores_observations():
    g = DiagonalGMM(np.ones(1), np.array([[0.2, 0.5, 0.7]]), np.ones((1, 3)))
    out = impute(g, np.array([True, False, False]), np.array([5.0]))
    np.testing.assert_allclose(out, [0.5, 0.7])


def test_symmetric_observed_block_keeps_prior_weights():
    g = DiagonalGMM(np.array([0.3, 0.7]), np.array([[0.4, 0.0], [0.4, 1.0]]),
                    np.array([[0.5, 1.0], [0.5, 2.0]]))
    mask = np.array([True, False])
    np.testing.assert_allclose(responsibilities(g, mask, [0.9]), [0.3, 0.7])
    np.testing.assert_allclose(impute(g, mask, [0.9]), [0.7])


def test_nothing_observed_gives_marginal_mean_and_all_observed_is_empty():
    rng = np.random.default_rng(2)
    g = random_gmm(rng, 3, 4)
    np.testing.assert_allclose(impute(g, np.zeros(4, bool), np.zeros(0)), g.weights @ g.means)
    assert impute(g, np.ones(4, bool), np.zeros(4)).size == 0


def test_two_component_monte_carlo():
    rng = np.random.default_rng(3)
    g = DiagonalGMM(np.array([0.4, 0.6]), np.array([[0.0, -1.0], [1.5, 2.0]]),
                    np.array([[0.5, 0.3], [0.8, 0.6]]))
    mask = np.array([True, False])
    est, se = mc_conditional_mean(g, mask, np.array([0.8]), rng)
    assert np.all(np.abs(impute(g, mask, [0.8]) - est) <= 3 * se)


def test_full_length_values_accepted():
    rng = np.random.default_rng(4)
    g = random_gmm(rng, 2, 3)
    mask = np.array([True, False, True])
    a = impute(g, mask, np.array([0.1, 99.0, 0.3]))
    b = impute(g, mask, np.array([0.1, 0.3]))
    np.testing.assert_array_equal(a, b)


@given(st.integers(0, 10 ** 6))
def test_responsibilities_are_a_distribution(seed):
    rng = np.random.default_rng(seed)
    g = random_gmm(rng, 4, 5, spread=5)
    mask = rng.random(5) < 0.5
    w = responsibilities(g, mask, rng.normal(scale=10, size=5))
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-9


def test_well_separated_limit():
    g = DiagonalGMM(np.array([0.5, 0.5]), np.array([[0.0, 0.1], [50.0, 0.9]]),
                    np.full((2, 2), 0.01))
    np.testing.assert_allclose(impute(g, np.array([True, False]), [50.0]), [0.9])


@given(st.integers(0, 10 ** 6))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    g = random_gmm(rng, 3, 5)
    mask = rng.random(5) < 0.5
    x = rng.normal(size=5)
    perm = rng.permutation(5)
    gp = DiagonalGMM(g.weights, g.means[:, perm], g.variances[:, perm])
    a = np.zeros(5)
    a[~mask] = impute(g, mask, x)
    b = np.zeros(5)
    b[~mask[perm]] = impute(gp, mask[perm], x[perm])
    np.testing.assert_allclose(a[perm], b, atol=1e-12)


def test_save_load(tmp_path):
    g = random_gmm(np.random.default_rng(5), 2, 3)
    g.save(tmp_path / "g.json")
    back = DiagonalGMM.load(tmp_path / "g.json")
    np.testing.assert_array_equal(back.means, g.means)
