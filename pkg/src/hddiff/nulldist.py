"""Estimated null distribution of the restricted likelihood-ratio statistic.

Under the null the statistic is asymptotically a weighted sum of independent
chi-square(1) variables. The weights are

* ``0`` (twice the size of the common set ``J``),
* ``+1`` / ``-1`` with counts fixed by the active-set sizes,
* ``+-sqrt(1 - mu)`` pairs, ``mu`` the eigenvalues of a small matrix built
  from Schur complements ("Q blocks") of score cross-moments.

:func:`weights_prop2` is the production path; :func:`weights_direct` takes
the eigenvalues of the full ``r x r`` matrix and serves as a cross-check.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, stats

from .exceptions import NullDistributionError
from .screening import ActiveSets

log = logging.getLogger(__name__)

RIDGE_EPS = 1e-8
CLAMP_TOL = 1e-6


@dataclass
class EventLog:
    """Counts of numerical rescue events during one weight estimation."""

    jitter: int = 0
    clamp: int = 0
    max_clamp: float = 0.0

    def merge(self, other: "EventLog") -> None:
        self.jitter += other.jitter
        self.clamp += other.clamp
        self.max_clamp = max(self.max_clamp, other.max_clamp)


@dataclass(frozen=True)
class NullWeights:
    """Weights of the chi-square mixture plus the structure they came from."""

    nu: np.ndarray
    n_zero: int
    n_plus_one: int
    n_minus_one: int
    n_paired: int
    mu: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def r(self) -> int:
        return int(self.nu.size)

    @property
    def structure(self) -> dict:
        return {
            "n_zero": self.n_zero,
            "n_plus_one": self.n_plus_one,
            "n_minus_one": self.n_minus_one,
            "n_paired": self.n_paired,
        }


@dataclass(frozen=True)
class QBlocks:
    """Schur-complement blocks for both populations.

    ``q_u``      Q^u over (ring_u, ring_u) at (phi_u, phi_u)
    ``q_uv_u``   Q^u over (ring_uv, ring_u) at (phi_uv, phi_u)
    ``q_uvu``    Q^u over (ring_uv, ring_uv) at (phi_uv, phi_uv)
    and the same with ``v``.
    """

    q_u: np.ndarray
    q_uv_u: np.ndarray
    q_uvu: np.ndarray
    q_v: np.ndarray
    q_uv_v: np.ndarray
    q_uvv: np.ndarray


# --------------------------------------------------------------------------- #
# Linear algebra helpers
# --------------------------------------------------------------------------- #


def _ridge(a: np.ndarray) -> np.ndarray:
    dim = a.shape[0]
    scale = abs(np.trace(a)) / dim if dim else 0.0
    return a + RIDGE_EPS * (scale if scale > 0 else 1.0) * np.eye(dim)


def _solve(a: np.ndarray, b: np.ndarray, what: str, events: EventLog | None) -> np.ndarray:
    """``a^{-1} b`` with one ridge rescue for ill-conditioned ``a``."""
    if a.shape[0] == 0:
        return np.zeros((0,) + b.shape[1:])
    if np.linalg.cond(a) < 1e12:
        return np.linalg.solve(a, b)
    if events is not None:
        events.jitter += 1
    log.info("ridge added to ill-conditioned %s (dim %d)", what, a.shape[0])
    a = _ridge(a)
    if not np.linalg.cond(a) < 1e14:
        raise NullDistributionError(f"{what} is singular even after ridge")
    return np.linalg.solve(a, b)


def _cholesky(a: np.ndarray, what: str, events: EventLog | None) -> np.ndarray:
    a = 0.5 * (a + a.T)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    if events is not None:
        events.jitter += 1
    log.info("ridge added to non-positive-definite %s (dim %d)", what, a.shape[0])
    try:
        return np.linalg.cholesky(_ridge(a))
    except np.linalg.LinAlgError:
        raise NullDistributionError(f"{what} is not positive definite") from None


def _whitened_eigvals(s: np.ndarray, t: np.ndarray, what: str, events: EventLog | None) -> np.ndarray:
    """Eigenvalues of ``s t^{-1}`` for symmetric ``s`` and positive definite ``t``."""
    if s.shape[0] == 0:
        return np.zeros(0)
    chol = _cholesky(t, what, events)
    m = np.linalg.solve(chol, np.linalg.solve(chol, 0.5 * (s + s.T)).T)
    return np.linalg.eigvalsh(0.5 * (m + m.T))


def _clamp_mu(mu: np.ndarray, events: EventLog | None) -> np.ndarray:
    if not np.all(np.isfinite(mu)):
        raise NullDistributionError("non-finite eigenvalue in the weight matrix")
    low = mu < 0
    high = mu > 1
    if np.any(mu < -CLAMP_TOL) or np.any(mu > 1 + CLAMP_TOL):
        worst = float(max(-mu.min(), mu.max() - 1))
        raise NullDistributionError(f"eigenvalue outside [0, 1] by {worst:.3g}")
    n_clamped = int(low.sum() + high.sum())
    if n_clamped:
        size = float(max(np.max(-mu[low], initial=0), np.max(mu[high] - 1, initial=0)))
        log.info("clamped %d eigenvalues into [0, 1] (max excursion %.3g)", n_clamped, size)
        if events is not None:
            events.clamp += n_clamped
            events.max_clamp = max(events.max_clamp, size)
    return np.clip(mu, 0.0, 1.0)


# --------------------------------------------------------------------------- #
# Q blocks and weights
# --------------------------------------------------------------------------- #


def compute_q(b_full: np.ndarray, j_size: int, events: EventLog | None = None) -> np.ndarray:
    """Schur complement ``B_ab - B_aJ B_JJ^{-1} B_Jb`` of a J-first block matrix.

    ``b_full`` covers (J + ring_a) x (J + ring_b) with J first on both axes.
    """
    b_full = np.asarray(b_full, dtype=float)
    jn = j_size
    b_ab = b_full[jn:, jn:]
    if jn == 0:
        return b_ab.copy()
    return b_ab - b_full[jn:, :jn] @ _solve(b_full[:jn, :jn], b_full[:jn, jn:], "B_JJ", events)


MomentFn = Callable[[str, str, str, list, list], np.ndarray]


def build_qblocks(moment: MomentFn, sets: ActiveSets, events: EventLog | None = None) -> QBlocks:
    """Assemble Q blocks from a cross-moment callback.

    ``moment(c, a, b, rows, cols)`` returns the estimate of
    ``E_c[s_rows(phi_a) s_cols(phi_b)^T]`` with ``c`` in {"u", "v"} and
    ``a``, ``b`` in {"u", "v", "uv"}.
    """
    j = sorted(sets.j)
    rings = {"u": sorted(sets.ring_u), "v": sorted(sets.ring_v), "uv": sorted(sets.ring_uv)}

    def q(c, a, b):
        rows = j + rings[a]
        cols = j + rings[b]
        full = _ordered_moment(moment, c, a, b, rows, cols)
        return compute_q(full, len(j), events=events)

    return QBlocks(
        q_u=q("u", "u", "u"),
        q_uv_u=q("u", "uv", "u"),
        q_uvu=q("u", "uv", "uv"),
        q_v=q("v", "v", "v"),
        q_uv_v=q("v", "uv", "v"),
        q_uvv=q("v", "uv", "uv"),
    )


def _ordered_moment(moment, c, a, b, rows, cols):
    # callbacks return blocks in sorted index order; permute to the J-first order
    out = moment(c, a, b, rows, cols)
    ri = np.argsort(np.argsort(rows))
    ci = np.argsort(np.argsort(cols))
    return out[np.ix_(ri, ci)]


def weights_prop2(qblocks: QBlocks, sets: ActiveSets, events: EventLog | None = None) -> NullWeights:
    """Null weights from the eigenvalue characterisation.

    With ``r_u + r_v >= r_uv`` the paired weights come from the
    ``|ring_uv|``-sized matrix (S_u + S_v) (Q^u_uv + Q^v_uv)^{-1}; otherwise
    from the ``|ring_u| + |ring_v|``-sized matrix K blockdiag(Q_u, Q_v)^{-1}.
    """
    ru, rv, ruv, nj = len(sets.i_u), len(sets.i_v), len(sets.i_uv), len(sets.j)
    t = qblocks.q_uvu + qblocks.q_uvv
    if ru + rv >= ruv:
        s = np.zeros_like(t)
        for g, qc, name in ((qblocks.q_uv_u, qblocks.q_u, "Q_u"), (qblocks.q_uv_v, qblocks.q_v, "Q_v")):
            if g.shape[1]:
                s = s + g @ _solve(qc, g.T, name, events)
        mu = _whitened_eigvals(s, t, "Q_uv", events)
        n_plus, n_minus = ru + rv - ruv, 0
    else:
        g = np.hstack([qblocks.q_uv_u, qblocks.q_uv_v])
        nu_, nv_ = qblocks.q_u.shape[0], qblocks.q_v.shape[0]
        d = np.zeros((nu_ + nv_, nu_ + nv_))
        d[:nu_, :nu_] = qblocks.q_u
        d[nu_:, nu_:] = qblocks.q_v
        if g.shape[0]:
            k = g.T @ _solve(t, g, "Q_uv", events)
        else:
            k = np.zeros_like(d)
        mu = _whitened_eigvals(k, d, "blockdiag(Q_u, Q_v)", events)
        n_plus, n_minus = nj, ruv - (ru + rv) + nj
    mu = _clamp_mu(mu, events)
    paired = np.sqrt(1.0 - mu)
    nu = np.concatenate([np.zeros(2 * nj), np.ones(n_plus), -np.ones(n_minus), paired, -paired])
    if nu.size != ru + rv + ruv:
        raise NullDistributionError(f"weight count {nu.size} does not match r = {ru + rv + ruv}")
    return NullWeights(nu=nu, n_zero=2 * nj, n_plus_one=n_plus, n_minus_one=n_minus,
                       n_paired=2 * mu.size, mu=mu)


def direct_w_matrix(b_ind: np.ndarray, b_joint: np.ndarray, b_joint_ind: np.ndarray) -> np.ndarray:
    """The ``r x r`` matrix whose eigenvalues are the null weights.

    ``[[I, B_ind,joint B_joint^{-1}], [-B_joint,ind B_ind^{-1}, -I]]`` with
    ``B_ind,joint = B_joint,ind^T``.
    """
    r_ind = b_ind.shape[0]
    r_joint = b_joint.shape[0]
    try:
        upper = np.linalg.solve(b_joint.T, b_joint_ind).T
        lower = np.linalg.solve(b_ind.T, b_joint_ind.T).T
    except np.linalg.LinAlgError:
        raise NullDistributionError("singular B_ind or B_joint") from None
    w = np.zeros((r_ind + r_joint, r_ind + r_joint))
    w[:r_ind, :r_ind] = np.eye(r_ind)
    w[:r_ind, r_ind:] = upper
    w[r_ind:, :r_ind] = -lower
    w[r_ind:, r_ind:] = -np.eye(r_joint)
    return w


def _cluster_means(ev: np.ndarray, tol: float) -> np.ndarray:
    # eigenvalues split off a defective (Jordan) eigenvalue scatter by ~sqrt(eps);
    # the mean of each cluster is well conditioned
    order = np.lexsort((ev.imag, ev.real))
    ev = ev[order]
    out = ev.copy()
    start = 0
    for i in range(1, ev.size + 1):
        if i == ev.size or abs(ev[i] - ev[i - 1]) > tol:
            out[start:i] = ev[start:i].mean()
            start = i
    return out


def weights_direct(moment: MomentFn, sets: ActiveSets, imag_tol: float = 1e-8,
                   cluster_tol: float = 1e-6) -> NullWeights:
    """Null weights as eigenvalues of the full matrix (diagnostic path).

    Numerically coincident eigenvalues (within ``cluster_tol``) are replaced
    by their mean before the imaginary parts are checked.
    """
    iu, iv, iuv = sorted(sets.i_u), sorted(sets.i_v), sorted(sets.i_uv)
    ru, rv = len(iu), len(iv)
    b_ind = np.zeros((ru + rv, ru + rv))
    b_ind[:ru, :ru] = moment("u", "u", "u", iu, iu)
    b_ind[ru:, ru:] = moment("v", "v", "v", iv, iv)
    b_joint = moment("u", "uv", "uv", iuv, iuv) + moment("v", "uv", "uv", iuv, iuv)
    b_joint_ind = np.hstack([moment("u", "uv", "u", iuv, iu), moment("v", "uv", "v", iuv, iv)])
    ev = np.linalg.eigvals(direct_w_matrix(b_ind, b_joint, b_joint_ind))
    if cluster_tol > 0:
        ev = _cluster_means(ev, cluster_tol)
    if np.max(np.abs(ev.imag), initial=0.0) > imag_tol:
        raise NullDistributionError(f"complex eigenvalue (imag {np.abs(ev.imag).max():.3g})")
    nu = np.sort(ev.real)
    tol = 1e-8
    return NullWeights(
        nu=nu,
        n_zero=int(np.sum(np.abs(nu) < tol)),
        n_plus_one=int(np.sum(np.abs(nu - 1) < tol)),
        n_minus_one=int(np.sum(np.abs(nu + 1) < tol)),
        n_paired=int(np.sum((np.abs(nu) >= tol) & (np.abs(np.abs(nu) - 1) >= tol))),
    )


# --------------------------------------------------------------------------- #
# Weighted chi-square distribution
# --------------------------------------------------------------------------- #


def _same_weight(nu: np.ndarray) -> float | None:
    if np.all(nu == nu[0]):
        return float(nu[0])
    return None


def wchisq_cdf(x: float, nu, epsabs: float = 1e-9) -> float:
    """P(sum_j nu_j Z_j^2 <= x) for independent standard normal Z_j.

    Imhof's inversion formula, integrated with adaptive quadrature on a
    finite head interval and a Fourier-weighted rule on the tail. Weights
    may be negative; zeros are dropped.
    """
    nu = np.asarray(nu, dtype=float).ravel()
    if not np.all(np.isfinite(nu)):
        raise ValueError("weights must be finite")
    nu = nu[nu != 0.0]
    if nu.size == 0:
        raise NullDistributionError("degenerate null: all weights are zero")
    x = float(x)
    if math.isnan(x):
        raise ValueError("x is NaN")
    c = _same_weight(nu)
    if c is not None:
        if c > 0:
            return float(stats.chi2.cdf(x / c, nu.size))
        return float(stats.chi2.sf(x / c, nu.size))
    if math.isinf(x):
        return 1.0 if x > 0 else 0.0
    # one-signed weights put all the mass on one side of zero
    if x <= 0 and np.all(nu > 0):
        return 0.0
    if x >= 0 and np.all(nu < 0):
        return 1.0
    return float(np.clip(_imhof_cdf(x, nu, epsabs), 0.0, 1.0))


def _imhof_cdf(x: float, lam: np.ndarray, epsabs: float) -> float:
    # the distribution is scale-equivariant; work with max |weight| = 1
    scale = float(np.max(np.abs(lam)))
    lam = lam / scale
    x = x / scale

    def amp_phase(u):
        a = 0.5 * np.sum(np.arctan(lam * u))
        logrho = 0.25 * np.sum(np.log1p((lam * u) ** 2))
        return a, math.exp(-logrho)

    def integrand(u):
        if u == 0.0:
            return 0.5 * (lam.sum() - x)
        a, inv_rho = amp_phase(u)
        return math.sin(a - 0.5 * x * u) * inv_rho / u

    omega = 0.5 * abs(x)
    lmax = float(np.max(np.abs(lam)))
    lmin = float(np.min(np.abs(lam)))
    m = lam.size

    def envelope(u):
        return amp_phase(u)[1] / u

    # the integrand is bounded by envelope(u) ~ u^(-1 - m/2); stop the head
    # once the remaining tail mass is negligible
    t_env = 4.0 / lmax
    while envelope(t_env) * t_env * 2.0 / m > 1e-3 * epsabs and t_env < 1e12 / lmax:
        t_env *= 2.0
    head = min(4.0 / lmin, t_env)
    if omega > 0:
        # keep the head to a bounded number of oscillations; the Fourier rule takes the rest
        head = min(head, 200.0 * 2.0 * math.pi / omega)
    points = []
    for pt in sorted(1.0 / abs(v) for v in lam if 1.0 / abs(v) < head):
        # near-equal breakpoints would leave quad a sub-ulp interval
        if not points or pt - points[-1] > 1e-9 * pt:
            points.append(pt)
    val, _ = integrate.quad(integrand, 0.0, head, points=points or None, epsabs=epsabs,
                            epsrel=1e-10, limit=2000)
    if envelope(head) * head * 2.0 / m <= 1e-3 * epsabs:
        tail = 0.0
    elif omega == 0.0:
        tail, _ = integrate.quad(integrand, head, np.inf, epsabs=epsabs, epsrel=1e-10, limit=2000)
    else:
        sign = 1.0 if x > 0 else -1.0

        def g_cos(u):
            a, inv_rho = amp_phase(u)
            return math.sin(a) * inv_rho / u

        def g_sin(u):
            a, inv_rho = amp_phase(u)
            return math.cos(a) * inv_rho / u

        # sin(a - s w u) = sin(a) cos(w u) - s cos(a) sin(w u)
        t1, _ = integrate.quad(g_cos, head, np.inf, weight="cos", wvar=omega, epsabs=epsabs, limlst=200)
        t2, _ = integrate.quad(g_sin, head, np.inf, weight="sin", wvar=omega, epsabs=epsabs, limlst=200)
        tail = t1 - sign * t2
    return 0.5 - (val + tail) / math.pi


def pvalue(lr: float, nu) -> float:
    """Upper-tail probability ``1 - Psi(lr; nu)``."""
    return float(np.clip(1.0 - wchisq_cdf(lr, nu), 0.0, 1.0))

