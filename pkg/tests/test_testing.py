import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import random_regression
from hddiff import simulate, testing
from hddiff.exceptions import InvalidInputError
from hddiff.models import Dataset
from hddiff.screening import ActiveSets
from hddiff.testing import TestConfig, aggregate_pvalues, multi_split_test, single_split_test


def _setting1(n=200, l=10, hypothesis="H0", alpha=0.5, seed=0, rep=0):
    return simulate.generate(simulate.SimSpec(n=n, l=l, hypothesis=hypothesis, alpha=alpha, seed=seed), rep)


# --------------------------------------------------------------------------- #
# Config
# --------------------------------------------------------------------------- #


def test_config_validation():
    for bad in (dict(k_splits=0), dict(gamma_min=1.0), dict(gamma_min=0.0),
                dict(b_estimator="x"), dict(screen_size=1), dict(threads=0)):
        with pytest.raises(InvalidInputError):
            TestConfig(**bad)


# --------------------------------------------------------------------------- #
# Restricted LR
# --------------------------------------------------------------------------- #


def test_lr_zero_for_identical_data(rng):
    d, _ = random_regression(rng, n=30, l=5)
    s = frozenset({0, 2, 5})
    lr, _ = testing.restricted_lr(d, d, ActiveSets(s, s, s))
    assert lr == pytest.approx(0.0, abs=1e-9)


def test_lr_nonnegative_when_nested(rng):
    for _ in range(20):
        u, _ = random_regression(rng, n=30, l=6)
        v, _ = random_regression(rng, n=25, l=6)
        lr, _ = testing.restricted_lr(u, v, ActiveSets({0, 1, 3, 6}, {0, 1, 3, 6}, {1, 3, 6}))
        assert lr >= -1e-9


def test_lr_can_be_negative():
    # non-nested models: the joint support may fit better than both individual ones
    seen = False
    for rep in range(30):
        u, v, _ = _setting1(n=40, l=8, rep=rep)
        lr, _ = testing.restricted_lr(u, v, ActiveSets({0, 8}, {1, 8}, set(range(9))))
        seen |= lr < 0
    assert seen


# --------------------------------------------------------------------------- #
# Single split
# --------------------------------------------------------------------------- #


def test_single_split_outcome_consistent(setting1_h0):
    u, v, truth = setting1_h0
    cfg = TestConfig(k_splits=1, seed=5)
    out = single_split_test(u, v, cfg, 1, truth.supports())
    assert out.valid and out.r == out.nu.r == out.active_sets.r
    assert out.pvalue == testing.nulldist.pvalue(out.lr, out.nu.nu)
    assert set(out.diagnostics.screening_hits) == {"u", "v", "uv"}
    assert single_split_test(u, v, cfg, 1).diagnostics.screening_hits is None
    again = single_split_test(u, v, cfg, 1, truth.supports())
    assert json.dumps(out.as_dict()) == json.dumps(again.as_dict())


def test_single_split_odd_sizes_extra_row_to_screening():
    cfg = TestConfig()
    assert testing._n_in(11, cfg) == 6 and testing._n_in(10, cfg) == 5
    assert testing._n_in(11, TestConfig(screen_size=3)) == 3


def test_single_split_rejects_tiny_input(rng):
    d, _ = random_regression(rng, n=3, l=2)
    with pytest.raises(InvalidInputError):
        single_split_test(d, d, TestConfig(), 1)


def test_single_split_invalid_outcome_recorded(rng):
    # noiseless response: the held-out restricted fit has zero residual variance
    x = rng.standard_normal((40, 2))
    d = Dataset(2.0 * x[:, 0], x)
    out = single_split_test(d, d, TestConfig(), 1)
    assert not out.valid and "DegenerateFitError" in out.error and out.pvalue is None
    assert out.as_dict()["valid"] is False
    with pytest.raises(testing.HddiffError, match="all 2 splits were invalid"):
        multi_split_test(d, d, TestConfig(k_splits=2))


def test_row_relabelling_invariance():
    u, v, _ = _setting1(n=60, l=10, seed=9)
    cfg = TestConfig(seed=2)
    pu, pv = testing.split_permutations(u.n, v.n, cfg.seed, 1)
    base = single_split_test(u, v, cfg, 1, perms=(pu, pv))
    # interleave the two halves at random but keep the order inside each half
    n_in = testing._n_in(u.n, cfg)
    ins, outs = np.sort(pu[:n_in]), np.sort(pu[n_in:])
    slots = np.random.default_rng(0).permutation(u.n) < n_in
    order = np.empty(u.n, dtype=int)
    order[slots], order[~slots] = ins, outs
    u2 = u.take(order)
    pu2 = np.concatenate([np.flatnonzero(slots), np.flatnonzero(~slots)])
    moved = single_split_test(u2, v, cfg, 1, perms=(pu2, pv))
    assert moved.lr == base.lr and moved.pvalue == base.pvalue
    assert moved.active_sets == base.active_sets


def test_single_split_power_setting1():
    rejections = 0
    for rep in range(20):
        u, v, _ = _setting1(n=200, l=25, hypothesis="HA", seed=11, rep=rep)
        out = single_split_test(u, v, TestConfig(seed=rep), 1)
        rejections += int(out.valid and out.pvalue < 0.05)
    assert rejections > 10


# --------------------------------------------------------------------------- #
# Aggregation
# --------------------------------------------------------------------------- #


def test_aggregate_examples():
    assert aggregate_pvalues([0.02]) == pytest.approx(0.019, abs=1e-15)
    # the display constant caps all-ones input at 1 - gamma_min; a larger one hits the clamp
    assert aggregate_pvalues(np.ones(50)) == pytest.approx(0.95, abs=1e-15)
    assert aggregate_pvalues(np.ones(50), constant=1.0 - math.log(0.05)) == 1.0
    assert aggregate_pvalues([0.3] * 10) == pytest.approx(0.95 * 0.3)
    assert aggregate_pvalues([0.0] * 4) == 1e-300
    assert aggregate_pvalues([0.02], constant=1.0) == pytest.approx(0.02)
    with pytest.raises(InvalidInputError):
        aggregate_pvalues([])
    with pytest.raises(InvalidInputError):
        aggregate_pvalues([1.5])


def test_aggregate_hand_computed():
    # K = 4, gamma_min = 0.05: candidates p_(i) * 4 / i = (0.4, 0.4, 0.4, 0.9)
    assert aggregate_pvalues([0.1, 0.2, 0.3, 0.9]) == pytest.approx(0.95 * 0.4)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.floats(0.01, 0.9))
def test_aggregate_matches_dense_grid(p, gmin):
    assert aggregate_pvalues(p, gmin) == pytest.approx(oracles.aggregate_dense(p, gmin), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.data())
def test_aggregate_monotone(p, data):
    i = data.draw(st.integers(0, len(p) - 1))
    bumped = list(p)
    bumped[i] = data.draw(st.floats(p[i], 1))
    assert aggregate_pvalues(bumped) >= aggregate_pvalues(p)


@given(st.lists(st.floats(1e-6, 1), min_size=1, max_size=30), st.floats(0.01, 1))
def test_aggregate_homogeneous(p, c):
    base = aggregate_pvalues(p)
    scaled = aggregate_pvalues(np.asarray(p) * c)
    if base < 1.0:
        assert scaled == pytest.approx(c * base, rel=1e-12)


# --------------------------------------------------------------------------- #
# Multi split
# --------------------------------------------------------------------------- #


def test_k1_returns_single_pvalue(setting1_h0):
    u, v, _ = setting1_h0
    cfg = TestConfig(k_splits=1, seed=3)
    report = multi_split_test(u, v, cfg)
    assert report.pvalue == max(single_split_test(u, v, cfg, 1).pvalue, 1e-300)
    assert report.as_dict()["method"] == "single-split"


def test_multi_split_deterministic_and_thread_independent(setting1_h0):
    u, v, _ = setting1_h0
    cfg = TestConfig(k_splits=6, seed=4)
    a = json.dumps(multi_split_test(u, v, cfg).as_dict(), sort_keys=True)
    b = json.dumps(multi_split_test(u, v, cfg).as_dict(), sort_keys=True)
    c = json.dumps(multi_split_test(u, v, TestConfig(k_splits=6, seed=4, threads=3)).as_dict(),
                   sort_keys=True)
    assert a == b == c


def test_multi_split_aggregates_valid_splits(setting1_h0):
    u, v, _ = setting1_h0
    report = multi_split_test(u, v, TestConfig(k_splits=5, seed=1))
    assert report.pvalue == aggregate_pvalues(report.valid_pvalues)
    d = report.as_dict()
    assert d["n_splits"] == 5 and d["n_valid"] + d["n_invalid"] == 5
    assert 0 < d["p_value"] <= 1


def test_sample_estimator_runs(setting1_h0):
    u, v, _ = setting1_h0
    out = single_split_test(u, v, TestConfig(b_estimator="sample", seed=2), 1)
    assert out.valid and 0 <= out.pvalue <= 1


def test_ggm_multi_split_runs():
    u, v, _ = simulate.generate(simulate.SimSpec("ggm", n=150, k=5, seed=2), 0)
    report = multi_split_test(u, v, TestConfig(k_splits=3))
    assert report.kind == "ggm" and 0 < report.pvalue <= 1
    assert report.as_dict()["splits"][0]["active_sets"]["i_u"][0].startswith("omega[")


def _backtest_pvalues(n, constant):
    out = []
    for rep in range(20):
        u, _, _ = _setting1(n=n, l=10, seed=13, rep=rep)
        report = testing.backtest(u, TestConfig(seed=rep, agg_constant=constant))
        assert report.extra["backtest"] is True
        out.append(report.pvalue)
    return np.array(out)


def test_backtest_not_anticonservative():
    # default constant: aggregated back-test p-values should not pile up near zero
    p = _backtest_pvalues(200, None)
    assert np.mean(p >= 0.5) >= 0.5
    assert np.mean(p <= 0.05) <= 0.1


def test_backtest_large_with_log_constant():
    # the 1 - log(gamma_min) constant makes back-tests return p near one
    p = _backtest_pvalues(1000, 1.0 - math.log(0.05))
    assert np.mean(p >= 0.5) >= 0.9


# --------------------------------------------------------------------------- #
# Ordinary LRT
# --------------------------------------------------------------------------- #


def test_ordinary_lrt_df_and_range(setting1_h0):
    u, v, _ = setting1_h0
    lr, p, df = testing.ordinary_lrt(u, v)
    assert df == 11 and lr >= 0 and 0 <= p <= 1
