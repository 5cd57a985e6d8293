"""l1-penalised screening with cross-validated regularisation.

The penalty uses the per-sample scaling

    regression:  ||y - X b||^2 / (2 n) + lam * ||b||_1      (standardised X)
    GGM:         -(log det O - tr(S O)) / 2 + lam/2 * sum_{j != j'} |O_jj'|

i.e. the average negative log-likelihood plus the penalty. A penalty ``lam``
here corresponds to ``n * lam`` on the summed log-likelihood (regression,
with sigma2 absorbed into the scaling) so grids stay comparable across
sample sizes. Standardisation is by column root-mean-square; there is no
intercept or centring because both models are zero-mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import _solvers
from .exceptions import ConvergenceError, InvalidInputError
from .models import GGM, REGRESSION, Dataset, always_active, check_compatible, concat, ggm_pairs, ggm_position

LASSO_TOL = 1e-9
LASSO_MAX_ITER = 100_000
GLASSO_TOL = 1e-8
GLASSO_MAX_SWEEPS = 1000
CV_TOL = 1e-7
GLASSO_CV_TOL = 1e-6


@dataclass(frozen=True)
class ScreeningConfig:
    n_folds: int = 10
    lambda_grid_size: int = 50
    lambda_min_ratio: float = 0.01
    cap_multiplier: Fraction = Fraction(1, 5)
    seed: int = 0
    patience: int = 10

    def __post_init__(self):
        if self.n_folds < 2:
            raise InvalidInputError("n_folds must be at least 2")
        if self.lambda_grid_size < 2:
            raise InvalidInputError("lambda_grid_size must be at least 2")
        if not 0 < self.lambda_min_ratio < 1:
            raise InvalidInputError("lambda_min_ratio must lie in (0, 1)")
        object.__setattr__(self, "cap_multiplier", Fraction(self.cap_multiplier).limit_denominator(10**6))
        if self.cap_multiplier <= 0:
            raise InvalidInputError("cap_multiplier must be positive")

    def cap_for(self, n: int) -> int:
        return max(1, math.ceil(self.cap_multiplier * n))

    def as_dict(self) -> dict:
        return {
            "n_folds": self.n_folds,
            "lambda_grid_size": self.lambda_grid_size,
            "lambda_min_ratio": self.lambda_min_ratio,
            "cap_multiplier": str(self.cap_multiplier),
            "seed": self.seed,
            "patience": self.patience,
        }


@dataclass(frozen=True)
class ActiveSets:
    """Screened index sets and their derived intersection and remainders."""

    i_u: frozenset
    i_v: frozenset
    i_uv: frozenset
    j: frozenset = field(init=False)
    ring_u: frozenset = field(init=False)
    ring_v: frozenset = field(init=False)
    ring_uv: frozenset = field(init=False)

    def __post_init__(self):
        for name in ("i_u", "i_v", "i_uv"):
            object.__setattr__(self, name, frozenset(int(i) for i in getattr(self, name)))
        j = self.i_u & self.i_v & self.i_uv
        object.__setattr__(self, "j", j)
        object.__setattr__(self, "ring_u", self.i_u - j)
        object.__setattr__(self, "ring_v", self.i_v - j)
        object.__setattr__(self, "ring_uv", self.i_uv - j)

    @property
    def r(self) -> int:
        return len(self.i_u) + len(self.i_v) + len(self.i_uv)

    def swapped(self) -> "ActiveSets":
        return ActiveSets(self.i_v, self.i_u, self.i_uv)

    def sizes(self) -> dict:
        return {"i_u": len(self.i_u), "i_v": len(self.i_v), "i_uv": len(self.i_uv), "j": len(self.j)}


@dataclass(frozen=True)
class L1Fit:
    """Result of one penalised fit.

    ``coef`` is on the original scale (beta, or the lower-triangle precision
    entries); ``std_coef`` is the standardised magnitude used for capping.
    """

    lam: float
    coef: np.ndarray
    std_coef: np.ndarray
    sigma2: float | None = None
    omega: np.ndarray | None = None


def _col_scale(x: np.ndarray) -> np.ndarray:
    scale = np.sqrt(np.mean(x * x, axis=0))
    scale[scale == 0] = 1.0
    return scale


def lambda_max(data: Dataset) -> float:
    """Smallest penalty giving the empty model."""
    if data.kind == REGRESSION:
        xs = data.x / _col_scale(data.x)
        return float(np.max(np.abs(xs.T @ data.y[:, 0])) / data.n)
    S = data.y.T @ data.y / data.n
    off = np.abs(S - np.diag(np.diag(S)))
    return float(off.max())


def fit_l1(data: Dataset, lam: float) -> L1Fit:
    """Penalised maximum-likelihood fit at a single ``lam``."""
    if not lam >= 0:
        raise InvalidInputError(f"lambda must be non-negative, got {lam}")
    if data.kind == REGRESSION:
        scale = _col_scale(data.x)
        xs = np.ascontiguousarray(data.x / scale)
        y = np.ascontiguousarray(data.y[:, 0])
        beta = np.zeros(xs.shape[1])
        sweeps = _solvers.lasso_cd(xs, y, float(lam), beta, LASSO_TOL, LASSO_MAX_ITER)
        if sweeps < 0:
            resid = y - xs @ beta
            raise ConvergenceError("lasso did not converge", iterations=LASSO_MAX_ITER,
                                   residual=float(np.linalg.norm(resid)))
        coef = beta / scale
        resid = y - xs @ beta
        return L1Fit(float(lam), coef, np.abs(beta), sigma2=float(resid @ resid) / data.n)
    k = data.y.shape[1]
    S = data.y.T @ data.y / data.n
    W = S.copy()
    B = np.zeros((k, k))
    mask = np.ones((k, k), dtype=bool)
    omega, sweeps = _solvers.glasso_bcd(S, float(lam), W, B, mask, GLASSO_TOL, GLASSO_MAX_SWEEPS, 1e-12)
    if sweeps < 0:
        raise ConvergenceError("graphical lasso did not converge", iterations=GLASSO_MAX_SWEEPS,
                               residual=float(np.abs(W - S)[np.diag_indices(k)].max()))
    rows, cols = ggm_pairs(k)
    coef = omega[rows, cols]
    d = np.sqrt(np.diag(omega))
    std = np.abs(omega / np.outer(d, d))[rows, cols]
    return L1Fit(float(lam), coef, std, omega=omega)


def lambda_grid(data: Dataset, config: ScreeningConfig) -> np.ndarray:
    lmax = lambda_max(data)
    if not lmax > 0:
        raise InvalidInputError("response is constant (zero); nothing to screen")
    return np.geomspace(lmax, lmax * config.lambda_min_ratio, config.lambda_grid_size)


def fold_ids(n: int, n_folds: int, rng: np.random.Generator) -> np.ndarray:
    """Balanced random fold labels 0..n_folds-1."""
    return rng.permutation(np.arange(n) % n_folds).astype(np.int64)


def _stream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tags))


def cv_folds(n: int, config: ScreeningConfig, stream: tuple = ()) -> np.ndarray:
    """Fold labels determined by (seed, stream, n) only, never by row content."""
    return fold_ids(n, config.n_folds, _stream(config.seed, *stream, n))


def select_lambda_cv(data: Dataset, config: ScreeningConfig, stream: tuple = (),
                     folds: np.ndarray | None = None) -> float:
    """K-fold CV choice of lambda maximising held-out log-likelihood.

    ``stream`` extends the seed; ``folds`` overrides the fold labels.
    """
    if data.n < config.n_folds:
        raise InvalidInputError(f"need at least {config.n_folds} rows for CV, got {data.n}")
    if data.kind == REGRESSION and np.ptp(data.y[:, 0]) == 0:
        raise InvalidInputError("response is constant")
    grid = lambda_grid(data, config)
    if folds is None:
        folds = cv_folds(data.n, config, stream)
    folds = np.ascontiguousarray(folds, dtype=np.int64)
    if data.kind == REGRESSION:
        xs = np.ascontiguousarray(data.x / _col_scale(data.x))
        scores = _solvers.lasso_cv_scores(xs, np.ascontiguousarray(data.y[:, 0]), folds,
                                          config.n_folds, grid, CV_TOL, LASSO_MAX_ITER, config.patience)
    else:
        scores = _solvers.glasso_cv_scores(np.ascontiguousarray(data.y), folds, config.n_folds,
                                           grid, GLASSO_CV_TOL, GLASSO_MAX_SWEEPS, 1e-8,
                                           config.patience)
    if not np.any(np.isfinite(scores)):
        raise ConvergenceError("no lambda on the grid produced a finite CV score")
    # argmax returns the first (largest-lambda) maximiser
    return float(grid[int(np.argmax(scores))])


def active_set(std_coef, cap: int, offset: int = 0, positions=None) -> frozenset:
    """Positions of nonzero coefficients, keeping at most ``cap`` of them.

    When more than ``cap`` survive, the largest magnitudes are kept with ties
    going to the smaller index. ``positions`` maps coefficient slots to flat
    parameter positions (defaults to ``offset + slot``).
    """
    if cap < 1:
        raise InvalidInputError("cap must be at least 1")
    mags = np.abs(np.asarray(std_coef, dtype=float))
    nz = np.flatnonzero(mags)
    if nz.size > cap:
        order = np.lexsort((nz, -mags[nz]))
        nz = np.sort(nz[order[:cap]])
    if positions is None:
        return frozenset(int(offset + i) for i in nz)
    positions = np.asarray(positions)
    return frozenset(int(positions[i]) for i in nz)


def screen(data: Dataset, config: ScreeningConfig, stream: tuple = (), cap: int | None = None,
           folds: np.ndarray | None = None) -> frozenset:
    """CV-tuned l1 fit on ``data`` turned into an active set (with always-active positions)."""
    lam = select_lambda_cv(data, config, stream, folds)
    fit = fit_l1(data, lam)
    if cap is None:
        cap = config.cap_for(data.n)
    if data.kind == REGRESSION:
        l = data.x.shape[1]
        return active_set(fit.std_coef, cap) | always_active(REGRESSION, l)
    k = data.y.shape[1]
    rows, cols = ggm_pairs(k)
    off = np.flatnonzero(rows != cols)
    selected = active_set(fit.std_coef[off], cap, positions=off)
    return selected | always_active(GGM, k)


def screen_all(u_in: Dataset, v_in: Dataset, config: ScreeningConfig, stream: tuple = ()) -> ActiveSets:
    """Screen U alone, V alone and the pooled sample.

    Folds depend only on (seed, stream, sample size) and the pooled folds are
    the two halves' folds stacked, so swapping U and V swaps ``i_u`` and
    ``i_v`` and leaves ``i_uv`` unchanged. Each run's cap is proportional to
    its own sample size.
    """
    check_compatible(u_in, v_in)
    fu = cv_folds(u_in.n, config, stream)
    fv = cv_folds(v_in.n, config, stream)
    i_u = screen(u_in, config, folds=fu)
    i_v = screen(v_in, config, folds=fv)
    i_uv = screen(concat(u_in, v_in), config, folds=np.concatenate([fu, fv]))
    return ActiveSets(i_u, i_v, i_uv)


__all__ = [
    "ActiveSets",
    "L1Fit",
    "ScreeningConfig",
    "active_set",
    "cv_folds",
    "fit_l1",
    "fold_ids",
    "ggm_position",
    "lambda_grid",
    "lambda_max",
    "screen",
    "screen_all",
    "select_lambda_cv",
]
