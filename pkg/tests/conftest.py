import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hddiff import simulate  # noqa: E402
from hddiff.models import Dataset, GgmParams, RegressionParams  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_regression(rng, n=40, l=5, sigma2=1.0, sparsity=0.6):
    x = rng.standard_normal((n, l))
    beta = rng.standard_normal(l) * (rng.random(l) < sparsity)
    y = x @ beta + np.sqrt(sigma2) * rng.standard_normal(n)
    return Dataset(y, x), RegressionParams(beta, sigma2)


def random_precision(rng, k, density=0.5):
    a = np.triu(rng.standard_normal((k, k)) * (rng.random((k, k)) < density), 1)
    a = a + a.T
    lo = np.linalg.eigvalsh(a)[0]
    return a + (abs(lo) + 0.5 + rng.random()) * np.eye(k)


def random_ggm(rng, n=60, k=4):
    omega = random_precision(rng, k)
    p = GgmParams(omega)
    y = rng.standard_normal((n, k)) @ np.linalg.cholesky(p.sigma).T
    return Dataset(y), p


@pytest.fixture
def setting1_h0():
    return simulate.generate(simulate.SimSpec(n=200, l=10, seed=3), 0)


def shared_truth_instance(rng, kind):
    """Random active sets with every cross-moment taken at one shared true parameter.

    Returns ``(moment, sets)`` where ``moment`` has the callback signature used
    by the weight builders. Both populations share the design, so the blocks
    for ``u`` and ``v`` coincide.
    """
    from hddiff import models
    from hddiff.screening import ActiveSets

    if kind == models.REGRESSION:
        l = int(rng.integers(3, 13))
        x = rng.standard_normal((max(3 * l, 20), l))
        params = models.RegressionParams(rng.standard_normal(l), rng.uniform(0.3, 3.0))
        free, fixed = np.arange(l), models.always_active(models.REGRESSION, l)
    else:
        k = int(rng.integers(2, 5))
        x = None
        params = models.GgmParams(random_precision(rng, k))
        rows, cols = models.ggm_pairs(k)
        free, fixed = np.flatnonzero(rows != cols), models.always_active(models.GGM, k)

    def pick():
        return set(fixed) | set(free[rng.random(free.size) < rng.uniform(0.2, 0.9)].tolist())

    sets = ActiveSets(pick(), pick(), pick())

    def moment(c, a, b, rows, cols):
        return models.cross_moment_plugin(params, params, params, rows, cols, x)

    return moment, sets
