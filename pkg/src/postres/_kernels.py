"""Inner-loop kernels with a numba path and a pure-numpy path.

Set ``POSTRES_DISABLE_NUMBA=1`` before import to force the numpy path.  Both
paths are always importable as ``*_numpy`` / ``*_numba`` so tests and the
benchmark can compare them directly.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

DISABLED = os.environ.get("POSTRES_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")
HAVE_NUMBA = numba is not None


def _soft(z, t):
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


def lasso_cd_numpy(X, y, lam, beta, col_sq, tol=1e-7, max_sweeps=10_000):
    """Cyclic coordinate descent, vectorised over rows only.

    Minimises ``||y - X beta||^2 / (2n) + lam * ||beta||_1`` for centred ``y``
    and ``X``; ``col_sq`` holds ``||X_j||^2 / n``.  Stops when the largest
    scaled coefficient move in a sweep is below ``tol``.
    """
    X = np.asarray(X, dtype=float)
    beta = np.array(beta, dtype=float)
    n, p = X.shape
    r = y - X @ beta
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        max_step = 0.0
        for j in range(p):
            cj = col_sq[j]
            if cj <= 0.0:
                continue
            old = beta[j]
            z = X[:, j] @ r / n + cj * old
            new = _soft(z, lam) / cj
            if new != old:
                d = new - old
                r -= X[:, j] * d
                beta[j] = new
                max_step = max(max_step, abs(d) * np.sqrt(cj))
        if max_step < tol:
            break
    return beta, sweeps


def _hc2_loop(D, w, r, A, clamp):
    n, k = D.shape
    meat = np.zeros((k, k))
    lev = np.empty(n)
    for i in range(n):
        h = 0.0
        for a in range(k):
            s = 0.0
            for b in range(k):
                s += A[a, b] * D[i, b]
            h += D[i, a] * s
        h *= w[i]
        if h > clamp:
            h = clamp
        lev[i] = h
        c = w[i] * w[i] * r[i] * r[i] / (1.0 - h)
        for a in range(k):
            da = c * D[i, a]
            for b in range(k):
                meat[a, b] += da * D[i, b]
    return meat, lev


def hc2_meat_numpy(D, w, r, A, clamp=1.0 - 1e-10):
    """HC2 meat sum_i w_i^2 r_i^2 / (1 - h_i) d_i d_i' and leverages h_i."""
    lev = np.einsum("ij,jk,ik->i", D, A, D) * w
    np.minimum(lev, clamp, out=lev)
    c = w * w * r * r / (1.0 - lev)
    meat = (D * c[:, None]).T @ D
    return meat, lev


if HAVE_NUMBA:
    _soft_nb = numba.njit(cache=True)(_soft)

    @numba.njit(cache=True)
    def _lasso_cd_nb(X, y, lam, beta, col_sq, tol, max_sweeps):
        n, p = X.shape
        r = y - X @ beta
        sweeps = 0
        for sweeps in range(1, max_sweeps + 1):
            max_step = 0.0
            for j in range(p):
                cj = col_sq[j]
                if cj <= 0.0:
                    continue
                old = beta[j]
                rho = 0.0
                for i in range(n):
                    rho += X[i, j] * r[i]
                z = rho / n + cj * old
                new = _soft_nb(z, lam) / cj
                if new != old:
                    d = new - old
                    for i in range(n):
                        r[i] -= X[i, j] * d
                    beta[j] = new
                    step = abs(d) * np.sqrt(cj)
                    if step > max_step:
                        max_step = step
            if max_step < tol:
                break
        return beta, sweeps

    _hc2_nb = numba.njit(cache=True)(_hc2_loop)

    def lasso_cd_numba(X, y, lam, beta, col_sq, tol=1e-7, max_sweeps=10_000):
        X = np.asfortranarray(X, dtype=np.float64)
        return _lasso_cd_nb(X, np.asarray(y, dtype=np.float64), float(lam),
                            np.array(beta, dtype=np.float64), np.asarray(col_sq, dtype=np.float64),
                            float(tol), int(max_sweeps))

    def hc2_meat_numba(D, w, r, A, clamp=1.0 - 1e-10):
        return _hc2_nb(np.ascontiguousarray(D, dtype=np.float64), np.asarray(w, dtype=np.float64),
                       np.asarray(r, dtype=np.float64), np.ascontiguousarray(A, dtype=np.float64),
                       float(clamp))
else:  # pragma: no cover
    lasso_cd_numba = lasso_cd_numpy
    hc2_meat_numba = hc2_meat_numpy


USE_NUMBA = HAVE_NUMBA and not DISABLED

lasso_cd = lasso_cd_numba if USE_NUMBA else lasso_cd_numpy
hc2_meat = hc2_meat_numba if USE_NUMBA else hc2_meat_numpy
