import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import random_ggm, random_precision, random_regression
from hddiff import models
from hddiff.exceptions import DegenerateFitError, InvalidInputError
from hddiff.models import Dataset, GgmParams, RegressionParams


# --------------------------------------------------------------------------- #
# Dataset and parameter validation
# --------------------------------------------------------------------------- #


def test_dataset_rejects_nonfinite_and_mismatch():
    with pytest.raises(InvalidInputError):
        Dataset([1.0, np.nan], [[1.0], [2.0]])
    with pytest.raises(InvalidInputError):
        Dataset([1.0, 2.0, 3.0], [[1.0], [2.0]])
    with pytest.raises(InvalidInputError):
        Dataset(np.ones((3, 2)), np.ones((3, 1)))


def test_dataset_kind_and_labels():
    reg = Dataset(np.zeros(3), np.ones((3, 2)))
    assert reg.kind == models.REGRESSION and reg.n_params == 3
    assert reg.labels == ("y", "x1", "x2")
    ggm = Dataset(np.ones((4, 3)))
    assert ggm.kind == models.GGM and ggm.n_params == 6
    assert ggm.labels == ("y1", "y2", "y3")


def test_dataset_is_read_only():
    d = Dataset(np.zeros(3), np.ones((3, 2)))
    with pytest.raises(ValueError):
        d.x[0, 0] = 5.0


def test_params_validation():
    with pytest.raises(InvalidInputError):
        RegressionParams(np.zeros(2), 0.0)
    with pytest.raises(InvalidInputError):
        GgmParams(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(InvalidInputError):
        GgmParams(np.array([[1.0, 0.1], [0.0, 1.0]]))


def test_ggm_sigma_inverts_omega(rng):
    for _ in range(20):
        p = GgmParams(random_precision(rng, 6))
        err = np.linalg.norm(p.sigma @ p.omega - np.eye(6), 2)
        assert err <= 1e-8 * np.linalg.norm(p.omega, 2)


# --------------------------------------------------------------------------- #
# Parameter layout
# --------------------------------------------------------------------------- #


@given(st.integers(min_value=1, max_value=30))
def test_ggm_layout_is_bijective(k):
    rows, cols = models.ggm_pairs(k)
    assert rows.size == k * (k + 1) // 2
    assert np.all(rows >= cols)
    for pos, (j, jp) in enumerate(zip(rows, cols)):
        assert models.ggm_position(j, jp) == pos
        assert models.ggm_position(jp, j) == pos
    assert models.ggm_k_from_p(rows.size) == k


def test_param_labels():
    assert models.param_label(models.REGRESSION, 0, ("y", "a", "b")) == "beta[a]"
    assert models.param_label(models.REGRESSION, 2, ("y", "a", "b")) == "sigma2"
    assert models.param_label(models.GGM, 1, ("a", "b")) == "omega[b,a]"


# --------------------------------------------------------------------------- #
# Log-likelihood
# --------------------------------------------------------------------------- #


def test_loglik_standard_normal_points():
    d = Dataset([0.0], [[0.0]])
    assert models.loglik(RegressionParams([0.0], 1.0), d) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    g = Dataset(np.zeros((1, 2)))
    assert models.loglik(GgmParams(np.eye(2)), g) == pytest.approx(-math.log(2 * math.pi), abs=1e-15)


def test_loglik_matches_brute_force(rng):
    for _ in range(10):
        d, p = random_regression(rng, n=15, l=4, sigma2=rng.uniform(0.3, 3))
        want = oracles.regression_loglik(d.y[:, 0], d.x, p.beta, p.sigma2)
        assert models.loglik(p, d) == pytest.approx(want, rel=1e-12)
        g, gp = random_ggm(rng, n=12, k=4)
        want = sum(oracles.mvn_logpdf(row, np.linalg.inv(gp.omega)) for row in g.y)
        assert models.loglik(gp, g) == pytest.approx(want, rel=1e-10)


def test_loglik_rejects_mismatched_params(rng):
    d, _ = random_regression(rng, l=3)
    with pytest.raises(InvalidInputError):
        models.loglik(RegressionParams(np.zeros(4), 1.0), d)
    with pytest.raises(InvalidInputError):
        models.loglik(GgmParams(np.eye(2)), d)


# --------------------------------------------------------------------------- #
# Restricted MLE
# --------------------------------------------------------------------------- #


def test_regression_restricted_mle_is_least_squares(rng):
    d, _ = random_regression(rng, n=30, l=6)
    fit = models.fit_restricted_mle(d, {0, 2, 5})
    cols = [0, 2, 5]
    coef, *_ = np.linalg.lstsq(d.x[:, cols], d.y[:, 0], rcond=None)
    assert np.allclose(fit.beta[cols], coef, atol=1e-12)
    assert np.all(fit.beta[[1, 3, 4]] == 0)
    r = d.y[:, 0] - d.x @ fit.beta
    assert fit.sigma2 == pytest.approx(r @ r / d.n, rel=1e-12)
    # normal equations: mean score on the active coordinates vanishes
    s = models.score(fit, d).mean(axis=0)
    assert np.max(np.abs(s[[0, 2, 5, 6]])) < 1e-8


def test_regression_exact_fit_is_degenerate():
    x = np.arange(1.0, 6.0)[:, None]
    with pytest.raises(DegenerateFitError, match="zero residual"):
        models.fit_restricted_mle(Dataset(2 * x[:, 0], x), {0})


def test_regression_unidentifiable_support(rng):
    d, _ = random_regression(rng, n=4, l=6)
    with pytest.raises(DegenerateFitError, match="unidentifiable"):
        models.fit_restricted_mle(d, range(5))


def test_restricted_mle_beats_perturbations(rng):
    d, _ = random_regression(rng, n=40, l=6)
    active = [1, 3, 4]
    fit = models.fit_restricted_mle(d, active)
    best = models.loglik(fit, d)
    for _ in range(100):
        beta = fit.beta.copy()
        beta[active] += 0.1 * rng.standard_normal(3)
        cand = RegressionParams(beta, fit.sigma2 * math.exp(0.1 * rng.standard_normal()))
        assert models.loglik(cand, d) <= best + 1e-9


def test_ggm_diagonal_only_mle(rng):
    d, _ = random_ggm(rng, k=5)
    fit = models.fit_restricted_mle(d, models.always_active(models.GGM, 5))
    s = models.second_moment(d)
    assert np.allclose(fit.omega, np.diag(1.0 / np.diag(s)), atol=1e-12)


def test_ggm_full_mle_is_inverse(rng):
    d, _ = random_ggm(rng, k=4)
    fit = models.fit_restricted_mle(d, range(10))
    assert np.allclose(fit.omega, np.linalg.inv(models.second_moment(d)), atol=1e-10)


def _ggm_mask(active, k):
    rows, cols = models.ggm_pairs(k)
    mask = np.zeros((k, k), dtype=bool)
    for pos in active:
        mask[rows[pos], cols[pos]] = mask[cols[pos], rows[pos]] = True
    return mask


def test_ggm_restricted_mle_stationarity(rng):
    for _ in range(20):
        k = int(rng.integers(3, 8))
        d, _ = random_ggm(rng, n=80, k=k)
        p = k * (k + 1) // 2
        active = set(np.flatnonzero(rng.random(p) < 0.4).tolist()) | models.always_active(models.GGM, k)
        fit = models.fit_restricted_mle(d, active)
        mask = _ggm_mask(active, k)
        gap = np.abs(np.linalg.inv(fit.omega) - models.second_moment(d))
        assert gap[mask].max() <= 1e-6
        assert np.all(fit.omega[~mask] == 0.0)


def test_ggm_restricted_mle_matches_projected_gradient(rng):
    for _ in range(5):
        k = int(rng.integers(3, 6))
        d, _ = random_ggm(rng, n=50, k=k)
        active = set(np.flatnonzero(rng.random(k * (k + 1) // 2) < 0.5).tolist()) | \
            models.always_active(models.GGM, k)
        s = models.second_moment(d)
        fit = models.fit_restricted_mle(d, active)
        ref = oracles.ggm_projected_gradient(s, _ggm_mask(active, k))
        assert oracles.ggm_objective(fit.omega, s) >= oracles.ggm_objective(ref, s) - 1e-9


# --------------------------------------------------------------------------- #
# Scores and cross-moments
# --------------------------------------------------------------------------- #


def test_score_closed_forms(rng):
    p = GgmParams(random_precision(rng, 3))
    s = models.score(p, Dataset(np.zeros((1, 3))))
    rows, cols = models.ggm_pairs(3)
    assert np.allclose(s[0], -p.sigma[rows, cols])
    x = rng.standard_normal((4, 3))
    beta = np.array([1.0, -2.0, 0.5])
    s = models.score(RegressionParams(beta, 2.0), Dataset(x @ beta, x))
    assert np.allclose(s[:, :3], 0.0)
    assert np.allclose(s[:, 3], -1.0 / 4.0)


def test_score_matches_oracle(rng):
    d, p = random_regression(rng, n=20, l=4, sigma2=1.7)
    assert np.allclose(models.score(p, d), oracles.regression_scores(d.y[:, 0], d.x, p.beta, p.sigma2))
    g, gp = random_ggm(rng, n=20, k=4)
    assert np.allclose(models.score(gp, g), oracles.ggm_scores(g.y, gp.sigma))


def test_mean_score_at_truth_vanishes():
    rng = np.random.default_rng(5)
    n = 100_000
    x = rng.standard_normal((n, 3))
    p = RegressionParams([1.0, 0.0, -0.5], 0.8)
    y = x @ p.beta + math.sqrt(p.sigma2) * rng.standard_normal(n)
    m = models.score(p, Dataset(y, x)).mean(axis=0)
    assert np.all(np.abs(m) <= 4 / math.sqrt(n))


def test_plugin_reduces_to_fisher_blocks(rng):
    x = rng.standard_normal((25, 4))
    p = RegressionParams(rng.standard_normal(4), 1.3)
    b = models.cross_moment_plugin(p, p, p, range(4), range(4), x)
    assert np.allclose(b, x.T @ x / 25 / 1.3, atol=1e-14)
    full = models.cross_moment_plugin(p, p, p, range(5), range(5), x)
    assert full[4, 4] == pytest.approx(1.0 / (2 * 1.3**2), rel=1e-13)
    assert np.allclose(full[:4, 4], 0.0, atol=1e-14)
    g = GgmParams(random_precision(rng, 3))
    s = g.sigma
    rows, cols = models.ggm_pairs(3)
    bg = models.cross_moment_plugin(g, g, g, range(6), range(6))
    for i in range(6):
        for k in range(6):
            j, jp, m, mp = rows[i], cols[i], rows[k], cols[k]
            assert bg[i, k] == pytest.approx(s[j, m] * s[jp, mp] + s[j, mp] * s[jp, m], rel=1e-13)


def test_plugin_transpose_symmetry(rng):
    x = rng.standard_normal((10, 5))
    ps = [RegressionParams(rng.standard_normal(5), rng.uniform(0.5, 2)) for _ in range(3)]
    rows, cols = [0, 2, 5], [1, 2, 3, 5]
    ab = models.cross_moment_plugin(ps[0], ps[1], ps[2], rows, cols, x)
    ba = models.cross_moment_plugin(ps[0], ps[2], ps[1], cols, rows, x)
    assert np.allclose(ab, ba.T, atol=1e-14)
    gs = [GgmParams(random_precision(rng, 4)) for _ in range(3)]
    ab = models.cross_moment_plugin(gs[0], gs[1], gs[2], [0, 3, 7], [1, 9])
    ba = models.cross_moment_plugin(gs[0], gs[2], gs[1], [1, 9], [0, 3, 7])
    assert np.allclose(ab, ba.T, atol=1e-14)


def test_sample_moment_definition_and_order_invariance(rng):
    d, p = random_regression(rng, n=1, l=3)
    s = models.score(p, d)[0]
    b = models.cross_moment_sample(p, p, [0, 3], [1, 2], d)
    assert np.allclose(b, np.outer(s[[0, 3]], s[[1, 2]]))
    d, p = random_regression(rng, n=30, l=3)
    q = RegressionParams(p.beta + 0.1, 2.0)
    perm = rng.permutation(30)
    a = models.cross_moment_sample(p, q, range(4), range(4), d)
    b = models.cross_moment_sample(p, q, range(4), range(4), d.take(perm))
    assert np.allclose(a, b, atol=1e-13)


def test_sample_moment_converges_to_plugin():
    rng = np.random.default_rng(9)
    n = 200_000
    x = rng.standard_normal((n, 3))
    p = RegressionParams([0.5, -1.0, 0.0], 1.5)
    y = x @ p.beta + math.sqrt(p.sigma2) * rng.standard_normal(n)
    d = Dataset(y, x)
    samp = models.cross_moment_sample(p, p, range(3), range(3), d)
    plug = models.cross_moment_plugin(p, p, p, range(3), range(3), x)
    assert np.max(np.abs(samp - plug)) <= 4 / math.sqrt(n) * 3


def _mc_regression_moment(c, a, b, rows, cols, x, reps, rng):
    xs = np.repeat(x, reps, axis=0)
    y = xs @ c.beta + math.sqrt(c.sigma2) * rng.standard_normal(xs.shape[0])
    sa = oracles.regression_scores(y, xs, a.beta, a.sigma2)[:, rows]
    sb = oracles.regression_scores(y, xs, b.beta, b.sigma2)[:, cols]
    prod = sa[:, :, None] * sb[:, None, :]
    return prod.mean(axis=0), prod.std(axis=0) / math.sqrt(prod.shape[0])


def test_plugin_regression_matches_monte_carlo():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((10, 3))
    c, a, b = (RegressionParams(rng.standard_normal(3) * 0.5, rng.uniform(0.5, 2)) for _ in range(3))
    rows = cols = [0, 1, 2, 3]
    mean, se = _mc_regression_moment(c, a, b, rows, cols, x, 100_000, rng)
    plug = models.cross_moment_plugin(c, a, b, rows, cols, x)
    assert np.all(np.abs(plug - mean) <= 4 * se)


def test_plugin_ggm_matches_monte_carlo():
    rng = np.random.default_rng(12)
    c, a, b = (GgmParams(random_precision(rng, 3)) for _ in range(3))
    y = rng.standard_normal((1_000_000, 3)) @ np.linalg.cholesky(c.sigma).T
    sa = oracles.ggm_scores(y, a.sigma)
    sb = oracles.ggm_scores(y, b.sigma)
    prod = sa[:, :, None] * sb[:, None, :]
    mean, se = prod.mean(axis=0), prod.std(axis=0) / 1000.0
    plug = models.cross_moment_plugin(c, a, b, range(6), range(6))
    assert np.all(np.abs(plug - mean) <= 4 * se)


# --------------------------------------------------------------------------- #
# Divergence
# --------------------------------------------------------------------------- #


def test_sym_kl_hand_values():
    # k = 1: Omega = 1 vs 2
    assert models.sym_kl(GgmParams([[1.0]]), GgmParams([[2.0]])) == pytest.approx(0.25, abs=1e-14)
    xx = np.eye(2)
    p1 = RegressionParams([0.3, -1.0], 1.0)
    p2 = RegressionParams([0.3, -1.0], 2.0)
    assert models.sym_kl(p1, p2, xx) == pytest.approx(0.25, abs=1e-14)
    assert models.sym_kl(p1, p1, xx) == 0.0


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(4)
    l, n = 3, 400_000
    x = rng.standard_normal((n, l))
    xx = x.T @ x / n
    p1 = RegressionParams([1.0, 0.0, -0.5], 0.7)
    p2 = RegressionParams([0.5, 0.2, -0.5], 1.4)
    y = x @ p1.beta + math.sqrt(p1.sigma2) * rng.standard_normal(n)
    lr = (-0.5 * np.log(p1.sigma2) - (y - x @ p1.beta) ** 2 / (2 * p1.sigma2)
          + 0.5 * np.log(p2.sigma2) + (y - x @ p2.beta) ** 2 / (2 * p2.sigma2))
    assert models.kl_divergence(p1, p2, xx) == pytest.approx(lr.mean(), abs=4 * lr.std() / math.sqrt(n))


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_sym_kl_symmetric_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = GgmParams(random_precision(rng, 4)), GgmParams(random_precision(rng, 4))
    assert models.sym_kl(a, b) >= 0
    assert models.sym_kl(a, b) == pytest.approx(models.sym_kl(b, a), rel=1e-12, abs=1e-14)
    xx = np.cov(rng.standard_normal((20, 3)), rowvar=False)
    r1 = RegressionParams(rng.standard_normal(3), rng.uniform(0.1, 3))
    r2 = RegressionParams(rng.standard_normal(3), rng.uniform(0.1, 3))
    assert models.sym_kl(r1, r2, xx) == pytest.approx(models.sym_kl(r2, r1, xx), rel=1e-12)


def test_sym_kl_requires_second_moment():
    p = RegressionParams([1.0], 1.0)
    with pytest.raises(InvalidInputError):
        models.sym_kl(p, p)
