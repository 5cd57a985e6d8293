"""Model contract for the two-sample test: linear regression and zero-mean GGMs.

Parameters of either model live in a flat vector ``phi`` of length ``p``:

* regression: ``phi = (beta_1, ..., beta_l, sigma2)``, so ``p = l + 1``;
* GGM: ``phi`` holds ``-0.5 * Omega_jj`` on the diagonal and ``-Omega_jj'``
  off it, laid out over the lower triangle row by row,
  ``(0,0), (1,0), (1,1), (2,0), ...``, so ``p = k (k + 1) / 2``.

Active sets are sets of integer positions into ``phi``. The noise variance
(regression) and the diagonal (GGM) are never screened and are always part
of every model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _solvers
from .exceptions import ConvergenceError, DegenerateFitError, InvalidInputError

LOG_2PI = math.log(2.0 * math.pi)

REGRESSION = "regression"
GGM = "ggm"


# --------------------------------------------------------------------------- #
# Data and parameter types
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Dataset:
    """Samples of one population.

    ``y`` is ``n x k`` (responses), ``x`` is ``n x l`` (predictors, ``l = 0``
    for a GGM). ``labels`` names the columns of ``y`` followed by ``x``.
    """

    y: np.ndarray
    x: np.ndarray | None = None
    labels: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        x = np.zeros((y.shape[0], 0)) if self.x is None else np.asarray(self.x, dtype=float)
        if x.size == 0:
            x = np.zeros((y.shape[0], 0))
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim != 2 or x.ndim != 2 or y.shape[0] != x.shape[0]:
            raise InvalidInputError(f"shape mismatch: y {y.shape}, x {x.shape}")
        if y.shape[0] < 1:
            raise InvalidInputError("dataset has no rows")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise InvalidInputError("dataset contains non-finite entries")
        if y.shape[1] == 1 and x.shape[1] == 0:
            raise InvalidInputError("regression data needs at least one predictor")
        if y.shape[1] > 1 and x.shape[1] > 0:
            raise InvalidInputError("GGM data must not carry predictors")
        labels = tuple(self.labels)
        if not labels:
            if x.shape[1]:
                labels = ("y",) + tuple(f"x{j + 1}" for j in range(x.shape[1]))
            else:
                labels = tuple(f"y{j + 1}" for j in range(y.shape[1]))
        if len(labels) != y.shape[1] + x.shape[1]:
            raise InvalidInputError("label count does not match column count")
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def kind(self) -> str:
        return REGRESSION if self.x.shape[1] > 0 else GGM

    @property
    def n_params(self) -> int:
        if self.kind == REGRESSION:
            return self.x.shape[1] + 1
        k = self.y.shape[1]
        return k * (k + 1) // 2

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.y[rows], self.x[rows], self.labels)

    def centered(self) -> "Dataset":
        return Dataset(self.y - self.y.mean(axis=0), self.x, self.labels)


def concat(a: Dataset, b: Dataset) -> Dataset:
    """Row-concatenate two compatible datasets (U first)."""
    check_compatible(a, b)
    return Dataset(np.vstack([a.y, b.y]), np.vstack([a.x, b.x]), a.labels)


def check_compatible(a: Dataset, b: Dataset) -> None:
    if a.kind != b.kind or a.y.shape[1] != b.y.shape[1] or a.x.shape[1] != b.x.shape[1]:
        raise InvalidInputError("datasets have different column layouts")
    if a.labels != b.labels:
        raise InvalidInputError("datasets have different column labels")


@dataclass(frozen=True)
class RegressionParams:
    beta: np.ndarray
    sigma2: float

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).ravel()
        if not np.all(np.isfinite(beta)):
            raise InvalidInputError("beta has non-finite entries")
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise InvalidInputError(f"sigma2 must be positive, got {self.sigma2}")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def n_params(self) -> int:
        return self.beta.size + 1

    def vector(self) -> np.ndarray:
        return np.append(self.beta, self.sigma2)


@dataclass(frozen=True)
class GgmParams:
    omega: np.ndarray
    sigma: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        omega = np.array(self.omega, dtype=float)
        if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
            raise InvalidInputError("omega must be square")
        if not np.allclose(omega, omega.T, rtol=0, atol=1e-10 * max(1.0, np.abs(omega).max())):
            raise InvalidInputError("omega must be symmetric")
        omega = 0.5 * (omega + omega.T)
        try:
            chol = np.linalg.cholesky(omega)
        except np.linalg.LinAlgError:
            raise InvalidInputError("omega is not positive definite") from None
        sigma = self.sigma
        if sigma is None:
            inv_chol = np.linalg.inv(chol)
            sigma = inv_chol.T @ inv_chol
        sigma = 0.5 * (np.asarray(sigma, dtype=float) + np.asarray(sigma, dtype=float).T)
        omega.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "sigma", sigma)

    @property
    def k(self) -> int:
        return self.omega.shape[0]

    @property
    def n_params(self) -> int:
        return self.k * (self.k + 1) // 2

    def vector(self) -> np.ndarray:
        rows, cols = ggm_pairs(self.k)
        scale = np.where(rows == cols, -0.5, -1.0)
        return scale * self.omega[rows, cols]


Params = RegressionParams | GgmParams


# --------------------------------------------------------------------------- #
# Parameter layout
# --------------------------------------------------------------------------- #


def ggm_position(j: int, jp: int) -> int:
    """Flat position of the GGM entry (j, j'), either order."""
    if jp > j:
        j, jp = jp, j
    return j * (j + 1) // 2 + jp


def ggm_pairs(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column of every flat GGM position, ``rows >= cols``."""
    rows, cols = [], []
    for j in range(k):
        for jp in range(j + 1):
            rows.append(j)
            cols.append(jp)
    return np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64)


def ggm_k_from_p(p: int) -> int:
    k = int(round((math.sqrt(8 * p + 1) - 1) / 2))
    if k * (k + 1) // 2 != p:
        raise InvalidInputError(f"{p} is not a triangular number")
    return k


def always_active(kind: str, dim: int) -> frozenset:
    """Positions that every model estimates freely.

    ``dim`` is ``l`` for regression (sigma2 sits at position ``l``) and ``k``
    for a GGM (the diagonal).
    """
    if kind == REGRESSION:
        return frozenset([dim])
    return frozenset(ggm_position(j, j) for j in range(dim))


def param_label(kind: str, position: int, labels: Sequence[str]) -> str:
    """Readable name of a flat parameter position."""
    if kind == REGRESSION:
        xlabels = labels[1:]
        if position == len(xlabels):
            return "sigma2"
        return f"beta[{xlabels[position]}]"
    k = len(labels)
    rows, cols = ggm_pairs(k)
    return f"omega[{labels[rows[position]]},{labels[cols[position]]}]"


def _dim(data: Dataset) -> int:
    return data.x.shape[1] if data.kind == REGRESSION else data.y.shape[1]


def _check_params(params, data: Dataset) -> None:
    if isinstance(params, RegressionParams):
        if data.kind != REGRESSION or params.beta.size != data.x.shape[1]:
            raise InvalidInputError("regression parameters do not match the data")
    elif isinstance(params, GgmParams):
        if data.kind != GGM or params.k != data.y.shape[1]:
            raise InvalidInputError("GGM parameters do not match the data")
    else:
        raise InvalidInputError(f"unknown parameter type {type(params).__name__}")


# --------------------------------------------------------------------------- #
# Log-likelihood and fits
# --------------------------------------------------------------------------- #


def loglik(params: Params, data: Dataset) -> float:
    """Sum of exact log-densities of the rows of ``data`` under ``params``."""
    _check_params(params, data)
    if isinstance(params, RegressionParams):
        r = data.y[:, 0] - data.x @ params.beta
        return float(-0.5 * data.n * (LOG_2PI + math.log(params.sigma2)) - r @ r / (2.0 * params.sigma2))
    k = params.k
    _, logdet = np.linalg.slogdet(params.omega)
    quad = np.einsum("ij,jk,ik->", data.y, params.omega, data.y)
    return float(0.5 * data.n * (logdet - k * LOG_2PI) - 0.5 * quad)


def second_moment(data: Dataset) -> np.ndarray:
    """Uncentred sample second-moment matrix of the responses."""
    return data.y.T @ data.y / data.n


def fit_restricted_mle(data: Dataset, active: Iterable[int], *, tol: float = 1e-10,
                       max_sweeps: int = 500) -> Params:
    """Maximum-likelihood fit with every position outside ``active`` pinned to zero.

    Always-active positions (sigma2, the GGM diagonal) are added if missing.
    """
    dim = _dim(data)
    active = frozenset(int(a) for a in active) | always_active(data.kind, dim)
    if data.kind == REGRESSION:
        return _fit_regression(data, sorted(a for a in active if a < dim))
    return _fit_ggm(data, active, tol=tol, max_sweeps=max_sweeps)


def _fit_regression(data: Dataset, cols: list[int]) -> RegressionParams:
    n, l = data.x.shape
    y = data.y[:, 0]
    beta = np.zeros(l)
    if cols:
        xa = data.x[:, cols]
        if n <= len(cols) or np.linalg.matrix_rank(xa) < len(cols):
            raise DegenerateFitError(f"unidentifiable support: {len(cols)} coefficients, {n} rows")
        coef, *_ = np.linalg.lstsq(xa, y, rcond=None)
        beta[cols] = coef
    resid = y - data.x @ beta
    sigma2 = float(resid @ resid) / n
    if sigma2 <= 1e-12 * max(1.0, float(y @ y) / n):
        raise DegenerateFitError("zero residual variance: exact fit on the support")
    return RegressionParams(beta, sigma2)


def _fit_ggm(data: Dataset, active: frozenset, tol: float, max_sweeps: int) -> GgmParams:
    k = data.y.shape[1]
    S = second_moment(data)
    if np.any(np.diag(S) <= 0):
        raise DegenerateFitError("a variable has zero second moment")
    mask = np.zeros((k, k), dtype=bool)
    rows, cols = ggm_pairs(k)
    for pos in active:
        mask[rows[pos], cols[pos]] = mask[cols[pos], rows[pos]] = True
    if mask.all():
        try:
            return GgmParams(np.linalg.inv(S), S)
        except (np.linalg.LinAlgError, InvalidInputError):
            raise DegenerateFitError("sample second-moment matrix is singular") from None
    W = S.copy()
    B = np.zeros((k, k))
    try:
        omega, sweeps = _solvers.glasso_bcd(S, 0.0, W, B, mask, tol, max_sweeps, 1e-12)
    except Exception as exc:  # singular block solves surface from numba as generic errors
        raise DegenerateFitError(f"constrained GGM fit failed: {exc}") from None
    if sweeps < 0:
        raise ConvergenceError(f"constrained GGM fit did not converge in {max_sweeps} sweeps",
                               iterations=max_sweeps)
    omega[~mask] = 0.0
    try:
        return GgmParams(omega)
    except InvalidInputError:
        raise DegenerateFitError("constrained GGM fit is not positive definite") from None


# --------------------------------------------------------------------------- #
# Scores and cross-moments
# --------------------------------------------------------------------------- #


def score(params: Params, data: Dataset) -> np.ndarray:
    """Per-row score vectors, shape ``n x p`` in the flat parameter layout."""
    _check_params(params, data)
    if isinstance(params, RegressionParams):
        r = data.y[:, 0] - data.x @ params.beta
        s2 = params.sigma2
        sb = data.x * (r / s2)[:, None]
        ss = (r * r / s2 - 1.0) / (2.0 * s2)
        return np.column_stack([sb, ss])
    rows, cols = ggm_pairs(params.k)
    return data.y[:, rows] * data.y[:, cols] - params.sigma[rows, cols]


def cross_moment_sample(a: Params, b: Params, rows, cols, data: Dataset) -> np.ndarray:
    """Sample analogue ``(1/n) sum_i s_rows(z_i; a) s_cols(z_i; b)^T``."""
    rows = np.asarray(sorted(rows), dtype=np.int64)
    cols = np.asarray(sorted(cols), dtype=np.int64)
    sa = score(a, data)[:, rows]
    sb = score(b, data)[:, cols]
    return sa.T @ sb / data.n


def cross_moment_plugin(c: Params, a: Params, b: Params, rows, cols,
                        data_x: np.ndarray | None = None) -> np.ndarray:
    """Closed-form ``(1/n) sum_i E_c[s_rows(Y|x_i; a) s_cols(Y|x_i; b)^T]``.

    Regression needs the predictor rows ``data_x``; the GGM ignores them.
    Rows/cols are sorted before use.
    """
    rows = np.asarray(sorted(rows), dtype=np.int64)
    cols = np.asarray(sorted(cols), dtype=np.int64)
    if isinstance(c, RegressionParams):
        if not (isinstance(a, RegressionParams) and isinstance(b, RegressionParams)):
            raise InvalidInputError("mixed parameter types")
        if data_x is None:
            raise InvalidInputError("regression cross-moments need predictor rows")
        full = _regression_moment_full(c, a, b, np.asarray(data_x, dtype=float), rows, cols)
        return full
    if not (isinstance(a, GgmParams) and isinstance(b, GgmParams)):
        raise InvalidInputError("mixed parameter types")
    return _ggm_moment(c.sigma, a.sigma, b.sigma, rows, cols)


def _regression_moment_full(c, a, b, X, rows, cols):
    n, l = X.shape
    if c.beta.size != l or a.beta.size != l or b.beta.size != l:
        raise InvalidInputError("predictor rows do not match parameter length")
    sc, sa, sb = c.sigma2, a.sigma2, b.sigma2
    da = X @ (c.beta - a.beta)
    db = X @ (c.beta - b.beta)
    out = np.zeros((rows.size, cols.size))
    rb = rows < l
    cb = cols < l
    # beta x beta block
    if rb.any() and cb.any():
        w = (sc + da * db) / (sa * sb)
        blk = (X[:, rows[rb]] * w[:, None]).T @ X[:, cols[cb]] / n
        out[np.ix_(rb, cb)] = blk
    # E[r_a r_b^2] and E[r_b r_a^2] with r = eps + d, eps ~ N(0, sc)
    if rb.any() and (~cb).any():
        e_ab2 = 2.0 * sc * db + da * sc + da * db * db
        w = (e_ab2 / sb - da) / (2.0 * sa * sb)
        out[np.ix_(rb, ~cb)] = (X[:, rows[rb]] * w[:, None]).mean(axis=0)[:, None]
    if (~rb).any() and cb.any():
        e_ba2 = 2.0 * sc * da + db * sc + db * da * da
        w = (e_ba2 / sa - db) / (2.0 * sa * sb)
        out[np.ix_(~rb, cb)] = (X[:, cols[cb]] * w[:, None]).mean(axis=0)[None, :]
    if (~rb).any() and (~cb).any():
        e4 = 3.0 * sc * sc + sc * (da * da + db * db + 4.0 * da * db) + da * da * db * db
        val = e4 / (sa * sb) - (sc + da * da) / sa - (sc + db * db) / sb + 1.0
        out[np.ix_(~rb, ~cb)] = float(np.mean(val)) / (4.0 * sa * sb)
    return out


def _ggm_moment(Sc, Sa, Sb, rows, cols):
    k = Sc.shape[0]
    pr, pc = ggm_pairs(k)
    j, jp = pr[rows], pc[rows]
    m, mp = pr[cols], pc[cols]
    first = (Sc[j, jp] - Sa[j, jp])[:, None] * (Sc[m, mp] - Sb[m, mp])[None, :]
    return first + Sc[np.ix_(j, m)] * Sc[np.ix_(jp, mp)] + Sc[np.ix_(j, mp)] * Sc[np.ix_(jp, m)]


# --------------------------------------------------------------------------- #
# Divergence
# --------------------------------------------------------------------------- #


def kl_divergence(p1: Params, p2: Params, xx: np.ndarray | None = None) -> float:
    """Kullback-Leibler divergence D(p1 || p2).

    For regression ``xx`` is the second-moment matrix of the predictors.
    """
    if isinstance(p1, RegressionParams) and isinstance(p2, RegressionParams):
        if xx is None:
            raise InvalidInputError("regression divergence needs the predictor second moment")
        d = p1.beta - p2.beta
        ratio = p1.sigma2 / p2.sigma2
        return float(0.5 * (ratio - 1.0 - math.log(ratio)) + d @ xx @ d / (2.0 * p2.sigma2))
    if isinstance(p1, GgmParams) and isinstance(p2, GgmParams):
        k = p1.k
        _, ld1 = np.linalg.slogdet(p1.omega)
        _, ld2 = np.linalg.slogdet(p2.omega)
        return float(0.5 * (np.sum(p2.omega * p1.sigma) - (ld1 - ld2) - k))
    raise InvalidInputError("divergence needs two parameters of the same model")


def sym_kl(p1: Params, p2: Params, xx: np.ndarray | None = None) -> float:
    """Symmetric Kullback-Leibler divergence D(p1||p2) + D(p2||p1)."""
    return max(0.0, kl_divergence(p1, p2, xx) + kl_divergence(p2, p1, xx))
