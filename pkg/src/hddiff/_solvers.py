"""Compiled inner loops for the l1 and constrained-likelihood solvers.

Everything here works on plain float64 arrays and is called through the
thin wrappers in :mod:`hddiff.models` and :mod:`hddiff.screening`.
"""

import math

import numpy as np
from numba import njit

_LOG_2PI = math.log(2.0 * math.pi)


@njit(cache=True, nogil=True)
def soft_threshold(z, lam):
    if z > lam:
        return z - lam
    if z < -lam:
        return z + lam
    return 0.0


@njit(cache=True, nogil=True)
def _gram_pass(G, grad, beta, lam, only_active):
    # grad_j = c_j - sum_k G_jk beta_k, kept current after every update
    p = G.shape[0]
    max_delta = 0.0
    for j in range(p):
        bj = beta[j]
        if only_active and bj == 0.0:
            continue
        gjj = G[j, j]
        if gjj == 0.0:
            continue
        new = soft_threshold(grad[j] + gjj * bj, lam) / gjj
        delta = new - bj
        if delta != 0.0:
            for i in range(p):
                grad[i] -= G[i, j] * delta
            beta[j] = new
            if abs(delta) > max_delta:
                max_delta = abs(delta)
    return max_delta


@njit(cache=True, nogil=True)
def lasso_gram(G, c, lam, beta, tol, max_iter):
    """Minimise b'Gb/2 - c'b + lam * ||b||_1 in place on ``beta``.

    With ``G = X'X/n`` and ``c = X'y/n`` this is the lasso
    ||y - X b||^2 / (2n) + lam ||b||_1. Cyclic coordinate descent with
    active-set inner loops; converged when a full sweep moves no coordinate
    by ``tol`` or more. Returns the number of full sweeps, or -1.
    """
    p = G.shape[0]
    grad = c.copy()
    for k in range(p):
        if beta[k] != 0.0:
            for i in range(p):
                grad[i] -= G[i, k] * beta[k]
    for sweep in range(max_iter):
        if _gram_pass(G, grad, beta, lam, False) < tol:
            return sweep + 1
        for _ in range(max_iter):
            if _gram_pass(G, grad, beta, lam, True) < tol:
                break
    return -1


@njit(cache=True, nogil=True)
def lasso_cd(X, y, lam, beta, tol, max_iter):
    """Lasso ||y - X b||^2 / (2n) + lam * ||b||_1, solved in place on ``beta``."""
    n = X.shape[0]
    G = X.T @ X / n
    c = X.T @ y / n
    return lasso_gram(G, c, lam, beta, tol, max_iter)


@njit(cache=True, nogil=True)
def lasso_cv_scores(X, y, folds, n_folds, lambdas, tol, max_iter, patience):
    """Summed held-out Gaussian log-likelihood for each lambda on the grid.

    ``lambdas`` must be decreasing. All folds advance along the grid together
    with warm starts; once the summed score has not improved for
    ``patience`` consecutive grid points the remaining entries are left at
    -inf (``patience <= 0`` runs the whole grid). Training-fold noise
    variance is the residual mean square.
    """
    n, p = X.shape
    n_lam = lambdas.shape[0]
    scores = np.full(n_lam, -np.inf)
    Gs = np.empty((n_folds, p, p))
    cs = np.empty((n_folds, p))
    yys = np.empty(n_folds)
    betas = np.zeros((n_folds, p))
    test_rows = []
    for f in range(n_folds):
        n_test = 0
        for i in range(n):
            if folds[i] == f:
                n_test += 1
        n_train = n - n_test
        Xtr = np.empty((n_train, p))
        ytr = np.empty(n_train)
        rows = np.empty(n_test, dtype=np.int64)
        a = 0
        b = 0
        for i in range(n):
            if folds[i] == f:
                rows[b] = i
                b += 1
            else:
                Xtr[a] = X[i]
                ytr[a] = y[i]
                a += 1
        Gs[f] = Xtr.T @ Xtr / n_train
        cs[f] = Xtr.T @ ytr / n_train
        yys[f] = (ytr @ ytr) / n_train
        test_rows.append(rows)
    best = -np.inf
    stale = 0
    for li in range(n_lam):
        total = 0.0
        for f in range(n_folds):
            beta = betas[f]
            if lasso_gram(Gs[f], cs[f], lambdas[li], beta, tol, max_iter) < 0:
                total = -np.inf
                break
            G = Gs[f]
            c = cs[f]
            sigma2 = yys[f] - 2.0 * (beta @ c) + beta @ (G @ beta)
            if sigma2 <= 1e-12 * yys[f]:
                total = -np.inf
                break
            rows = test_rows[f]
            rss = 0.0
            for i in rows:
                r = y[i]
                for j in range(p):
                    r -= X[i, j] * beta[j]
                rss += r * r
            total += -0.5 * rows.shape[0] * (_LOG_2PI + math.log(sigma2)) - rss / (2.0 * sigma2)
        scores[li] = total
        if total > best:
            best = total
            stale = 0
        else:
            stale += 1
            if patience > 0 and stale >= patience:
                break
    return scores


@njit(cache=True, nogil=True)
def _quad_lasso(V, s, lam, beta, free, tol, max_iter):
    # min 0.5 b'Vb - s'b + lam ||b||_1 over coordinates with free[j]
    m = V.shape[0]
    for _ in range(max_iter):
        max_delta = 0.0
        for j in range(m):
            if not free[j]:
                continue
            z = s[j]
            for i in range(m):
                if i != j:
                    z -= V[j, i] * beta[i]
            new = soft_threshold(z, lam) / V[j, j]
            d = abs(new - beta[j])
            if d > max_delta:
                max_delta = d
            beta[j] = new
        if max_delta < tol:
            return True
    return False


@njit(cache=True, nogil=True)
def glasso_bcd(S, lam, W, Bmat, mask, tol, max_sweeps, inner_tol):
    """Block coordinate descent for the graphical lasso.

    Maximises log det O - tr(S O) - lam * sum_{j != j'} |O_jj'| with the
    diagonal unpenalised. ``mask[j, j']`` False pins that entry at zero.
    ``W`` (covariance iterate) and ``Bmat`` (column regressions) are warm
    starts updated in place. Returns (precision, sweeps); sweeps is -1
    without convergence.
    """
    k = S.shape[0]
    for j in range(k):
        W[j, j] = S[j, j]
    sweeps = -1
    for sweep in range(max_sweeps):
        max_change = 0.0
        for j in range(k):
            idx = np.empty(k - 1, dtype=np.int64)
            a = 0
            for i in range(k):
                if i != j:
                    idx[a] = i
                    a += 1
            V = np.empty((k - 1, k - 1))
            s = np.empty(k - 1)
            beta = np.empty(k - 1)
            free = np.empty(k - 1, dtype=np.bool_)
            for a in range(k - 1):
                s[a] = S[idx[a], j]
                beta[a] = Bmat[idx[a], j]
                free[a] = mask[idx[a], j]
                if not free[a]:
                    beta[a] = 0.0
                for b in range(k - 1):
                    V[a, b] = W[idx[a], idx[b]]
            if lam == 0.0:
                # constrained, unpenalised block: exact solve on the free rows
                nf = 0
                for a in range(k - 1):
                    if free[a]:
                        nf += 1
                if nf > 0:
                    fidx = np.empty(nf, dtype=np.int64)
                    c = 0
                    for a in range(k - 1):
                        if free[a]:
                            fidx[c] = a
                            c += 1
                    Vf = np.empty((nf, nf))
                    sf = np.empty(nf)
                    for a in range(nf):
                        sf[a] = s[fidx[a]]
                        for b in range(nf):
                            Vf[a, b] = V[fidx[a], fidx[b]]
                    bf = np.linalg.solve(Vf, sf)
                    for a in range(k - 1):
                        beta[a] = 0.0
                    for a in range(nf):
                        beta[fidx[a]] = bf[a]
                else:
                    for a in range(k - 1):
                        beta[a] = 0.0
            else:
                _quad_lasso(V, s, lam, beta, free, inner_tol, 10000)
            for a in range(k - 1):
                w = 0.0
                for b in range(k - 1):
                    w += V[a, b] * beta[b]
                d = abs(w - W[idx[a], j])
                if d > max_change:
                    max_change = d
                W[idx[a], j] = w
                W[j, idx[a]] = w
                Bmat[idx[a], j] = beta[a]
        if max_change < tol:
            sweeps = sweep + 1
            break
    O = np.zeros((k, k))
    for j in range(k):
        acc = 0.0
        for i in range(k):
            if i != j:
                acc += W[i, j] * Bmat[i, j]
        ojj = 1.0 / (W[j, j] - acc)
        O[j, j] = ojj
        for i in range(k):
            if i != j:
                O[i, j] = -Bmat[i, j] * ojj
    # symmetrise; an entry that is zero in one column is zero in both at the optimum
    for j in range(k):
        for i in range(j + 1, k):
            if O[i, j] == 0.0 or O[j, i] == 0.0:
                v = 0.0
            else:
                v = 0.5 * (O[i, j] + O[j, i])
            O[i, j] = v
            O[j, i] = v
    return O, sweeps


@njit(cache=True, nogil=True)
def _ggm_heldout(S_test, n_test, O):
    k = O.shape[0]
    sign, logdet = np.linalg.slogdet(O)
    if sign <= 0:
        return -np.inf
    tr = 0.0
    for i in range(k):
        for j in range(k):
            tr += S_test[i, j] * O[j, i]
    return 0.5 * n_test * (logdet - tr - k * _LOG_2PI)


@njit(cache=True, nogil=True)
def glasso_cv_scores(Y, folds, n_folds, lambdas, tol, max_sweeps, inner_tol, patience):
    """Summed held-out zero-mean Gaussian log-likelihood for each lambda.

    Same fold-interleaved, early-stopped path as :func:`lasso_cv_scores`.
    """
    n, k = Y.shape
    n_lam = lambdas.shape[0]
    scores = np.full(n_lam, -np.inf)
    mask = np.ones((k, k), dtype=np.bool_)
    S_tr = np.zeros((n_folds, k, k))
    S_te = np.zeros((n_folds, k, k))
    n_te = np.zeros(n_folds, dtype=np.int64)
    for i in range(n):
        f = folds[i]
        n_te[f] += 1
        for g in range(n_folds):
            if g == f:
                continue
            for a in range(k):
                for b in range(k):
                    S_tr[g, a, b] += Y[i, a] * Y[i, b]
        for a in range(k):
            for b in range(k):
                S_te[f, a, b] += Y[i, a] * Y[i, b]
    Ws = np.empty((n_folds, k, k))
    Bs = np.zeros((n_folds, k, k))
    for f in range(n_folds):
        S_tr[f] /= n - n_te[f]
        S_te[f] /= n_te[f]
        Ws[f] = S_tr[f]
    best = -np.inf
    stale = 0
    for li in range(n_lam):
        total = 0.0
        for f in range(n_folds):
            O, sweeps = glasso_bcd(S_tr[f], lambdas[li], Ws[f], Bs[f], mask, tol, max_sweeps, inner_tol)
            if sweeps < 0:
                total = -np.inf
                break
            total += _ggm_heldout(S_te[f], n_te[f], O)
        scores[li] = total
        if total > best:
            best = total
            stale = 0
        else:
            stale += 1
            if patience > 0 and stale >= patience:
                break
    return scores
