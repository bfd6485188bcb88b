"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both implementations are called directly, so the POSTRES_DISABLE_NUMBA flag
does not matter here.  First-call JIT time is reported separately.
"""

import argparse
import time

import numpy as np

from postres import _kernels as k
from postres.residualizer import expand


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def lasso_case(n, p, seed=0):
    rng = np.random.default_rng(seed)
    X = expand(rng.standard_normal((n, p)))
    X = (X - X.mean(0)) / X.std(0)
    y = X[:, 0] - 0.5 * X[:, 3] + rng.standard_normal(n)
    y = y - y.mean()
    lam = 0.01 * np.max(np.abs(X.T @ y)) / n
    col_sq = (X * X).sum(0) / n
    return X, y, lam, col_sq


def hc2_case(n, p, seed=0):
    rng = np.random.default_rng(seed)
    D = np.column_stack([np.ones(n), rng.integers(0, 2, n), rng.standard_normal((n, p))])
    w = rng.lognormal(0, 0.5, n)
    r = rng.standard_normal(n)
    A = np.linalg.inv(D.T @ (w[:, None] * D))
    return D, w, r, A


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not k.HAVE_NUMBA:
        print("numba not installed; only the numpy path is available")
        return

    print(f"{'kernel':<8} {'size':>14} {'numpy s':>10} {'numba s':>10} {'speedup':>8} {'max |diff|':>11}")
    for n, p in ((1000, 3), (10_000, 3), (10_000, 8)):
        X, y, lam, col_sq = lasso_case(n, p)
        b0 = np.zeros(X.shape[1])
        t_jit = time.perf_counter()
        k.lasso_cd_numba(X, y, lam, b0, col_sq)
        t_jit = time.perf_counter() - t_jit
        t_np, (b_np, _) = _best(lambda: k.lasso_cd_numpy(X, y, lam, b0.copy(), col_sq), args.repeat)
        t_nb, (b_nb, _) = _best(lambda: k.lasso_cd_numba(X, y, lam, b0, col_sq), args.repeat)
        print(f"{'lasso':<8} {f'{n}x{X.shape[1]}':>14} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f} "
              f"{np.max(np.abs(b_np - b_nb)):11.2e}   (first call {t_jit:.2f}s)")

    for n, p in ((1000, 3), (10_000, 3), (100_000, 6)):
        D, w, r, A = hc2_case(n, p)
        t_np, (m_np, _) = _best(lambda: k.hc2_meat_numpy(D, w, r, A), args.repeat)
        t_nb, (m_nb, _) = _best(lambda: k.hc2_meat_numba(D, w, r, A), args.repeat)
        print(f"{'hc2':<8} {f'{n}x{D.shape[1]}':>14} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f} "
              f"{np.max(np.abs(m_np - m_nb)) / np.max(np.abs(m_np)):11.2e}")


if __name__ == "__main__":
    main()
