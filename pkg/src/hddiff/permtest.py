"""Permutation baseline: symmetric KL divergence between l1 fits of the two groups."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import models
from .exceptions import HddiffError, InvalidInputError
from .models import REGRESSION, Dataset, GgmParams, RegressionParams, check_compatible, concat
from .screening import ScreeningConfig, cv_folds, fit_l1, select_lambda_cv

log = logging.getLogger(__name__)

MAX_RETRIES = 3


@dataclass(frozen=True)
class PermConfig:
    n_perm: int = 100
    seed: int = 0
    reselect_lambda: bool = True
    screening: ScreeningConfig = field(default_factory=ScreeningConfig)
    threads: int = 1

    def __post_init__(self):
        if self.n_perm < 1:
            raise InvalidInputError("n_perm must be at least 1")
        if self.threads < 1:
            raise InvalidInputError("threads must be at least 1")

    def as_dict(self) -> dict:
        return {
            "n_perm": self.n_perm,
            "seed": self.seed,
            "reselect_lambda": self.reselect_lambda,
            "screening": self.screening.as_dict(),
        }


@dataclass(frozen=True)
class PermResult:
    statistic: float
    pvalue: float
    perm_stats: np.ndarray
    exceedances: int
    lambdas: tuple
    retries: int = 0

    def as_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.pvalue,
            "exceedances": self.exceedances,
            "n_perm": int(self.perm_stats.size),
            "lambda_u": self.lambdas[0],
            "lambda_v": self.lambdas[1],
            "retries": self.retries,
            "perm_statistics": [float(s) for s in self.perm_stats],
        }


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tags))


def _params(data: Dataset, lam: float):
    fit = fit_l1(data, lam)
    if data.kind == REGRESSION:
        if not fit.sigma2 > 0:
            raise HddiffError("l1 fit left no residual variance")
        return RegressionParams(fit.coef, fit.sigma2)
    return GgmParams(fit.omega)


def _statistic(u: Dataset, v: Dataset, config: PermConfig, stream: tuple, lambdas=None, xx=None):
    scfg = config.screening
    if lambdas is None:
        # both groups share one fold stream so the statistic is symmetric in (u, v)
        lam_u = select_lambda_cv(u, scfg, folds=cv_folds(u.n, scfg, stream))
        lam_v = select_lambda_cv(v, scfg, folds=cv_folds(v.n, scfg, stream))
    else:
        lam_u, lam_v = lambdas
    stat = models.sym_kl(_params(u, lam_u), _params(v, lam_v), xx)
    return stat, (lam_u, lam_v)


def perm_test(u: Dataset, v: Dataset, config: PermConfig = PermConfig()) -> PermResult:
    """Permutation p-value of the symmetric KL divergence between CV-tuned l1 fits.

    ``p = (1 + #{perm stat >= observed}) / (1 + n_perm)``. For regression the
    predictor second moment is the pooled one, held fixed across
    permutations. A permutation whose fit fails is redrawn up to
    ``MAX_RETRIES`` times.
    """
    check_compatible(u, v)
    config = dataclasses.replace(config, screening=dataclasses.replace(config.screening, seed=config.seed))
    pooled = concat(u, v)
    xx = pooled.x.T @ pooled.x / pooled.n if u.kind == REGRESSION else None
    observed, lambdas = _statistic(u, v, config, (0, 0), xx=xx)
    fixed = None if config.reselect_lambda else lambdas

    def one(i):
        err = None
        for attempt in range(MAX_RETRIES + 1):
            perm = _rng(config.seed, i, attempt).permutation(pooled.n)
            pu, pv = pooled.take(perm[:u.n]), pooled.take(perm[u.n:])
            try:
                stat, _ = _statistic(pu, pv, config, (i, attempt), fixed, xx)
                return stat, attempt
            except (HddiffError, np.linalg.LinAlgError) as exc:
                log.info("permutation %d attempt %d failed: %s", i, attempt, exc)
                err = exc
        raise HddiffError(f"permutation {i} failed after {MAX_RETRIES} retries: {err}") from err

    ids = range(1, config.n_perm + 1)
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(one, ids))
    else:
        results = [one(i) for i in ids]
    stats = np.array([r[0] for r in results])
    exceed = int(np.sum(stats >= observed))
    p = (1 + exceed) / (1 + config.n_perm)
    return PermResult(float(observed), float(p), stats, exceed, tuple(float(x) for x in lambdas),
                      sum(r[1] for r in results))
