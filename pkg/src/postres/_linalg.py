"""Weighted least squares via QR of the sqrt(w)-scaled design, plus HC2."""

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import _kernels
from .exceptions import RankDeficient

RANK_TOL = 1e-10


@dataclass
class WLSFit:
    coef: np.ndarray
    resid: np.ndarray
    bread: np.ndarray  # (D' W D)^{-1}

    def hc2_cov(self, D, w):
        meat, _ = _kernels.hc2_meat(D, w, self.resid, self.bread)
        return self.bread @ meat @ self.bread


def check_rank(R, what="design"):
    s = np.linalg.svd(R, compute_uv=False)
    if s.size and (not np.all(np.isfinite(s)) or s[-1] <= RANK_TOL * s[0]):
        raise RankDeficient(f"{what} is rank deficient (condition {s[0] / max(s[-1], 1e-300):.3g})")


def wls(D, y, w, what="design") -> WLSFit:
    """Weighted least squares; raises RankDeficient instead of pseudo-inverting."""
    sw = np.sqrt(w)
    Q, R = np.linalg.qr(D * sw[:, None])
    check_rank(R, what)
    coef = linalg.solve_triangular(R, Q.T @ (sw * y))
    Rinv = linalg.solve_triangular(R, np.eye(R.shape[0]))
    bread = Rinv @ Rinv.T
    return WLSFit(coef=coef, resid=y - D @ coef, bread=bread)


def wls_minnorm(D, y, w):
    """Minimal-norm weighted least squares; returns (coef, resid, rank_deficient)."""
    sw = np.sqrt(w)
    Dw = D * sw[:, None]
    coef, _, rank, _ = np.linalg.lstsq(Dw, sw * y, rcond=RANK_TOL)
    return coef, y - D @ coef, rank < D.shape[1]


def weighted_resid(Z, y, w):
    """Residuals of the w-weighted regression of y on [1, Z]."""
    D = np.column_stack([np.ones(len(y)), Z]) if Z.size else np.ones((len(y), 1))
    coef, resid, deficient = wls_minnorm(D, y, w)
    return resid, deficient
