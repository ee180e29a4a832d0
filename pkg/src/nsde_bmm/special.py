"""Scalar special functions used by the moment formulas and the calibration metric.

All functions are vectorized over numpy arrays and pure.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special as _sp

__all__ = ["std_normal_pdf", "std_normal_cdf", "sr", "chi2_cdf", "chi2_inverse_cdf"]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def std_normal_pdf(x):
    """Standard normal density ``exp(-x**2/2) / sqrt(2*pi)``."""
    x = np.asarray(x, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def std_normal_cdf(x):
    """Standard normal CDF.

    Backed by the Cephes ``ndtr`` routine (rational erf/erfc approximations,
    absolute error near double-precision round-off on the whole real line).
    """
    return _sp.ndtr(np.asarray(x, dtype=float))


def sr(eps):
    """``pdf(eps) + eps * cdf(eps)``: mean of ``max(0, eps + N(0, 1))``."""
    eps = np.asarray(eps, dtype=float)
    return std_normal_pdf(eps) + eps * std_normal_cdf(eps)


def chi2_cdf(r, dof: int):
    """P(X <= r) for X ~ chi-squared with ``dof`` degrees of freedom."""
    r = np.asarray(r, dtype=float)
    return _sp.gammainc(0.5 * dof, 0.5 * np.maximum(r, 0.0))


def chi2_inverse_cdf(p: float, dof: int, max_iter: int = 200) -> float:
    """Quantile of the chi-squared distribution by bisection.

    Parameters
    ----------
    p : float
        Probability in the open interval (0, 1).
    dof : int
        Degrees of freedom, at least 1.
    max_iter : int
        Bisection iteration cap.

    Returns
    -------
    float
        ``r`` such that ``chi2_cdf(r, dof) == p`` to within 1e-10.
    """
    if not (0.0 < p < 1.0):
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if int(dof) != dof or dof < 1:
        raise ValueError(f"dof must be a positive integer, got {dof}")
    lo, hi = 0.0, max(1.0, float(dof))
    while chi2_cdf(hi, dof) < p:
        lo, hi = hi, 2.0 * hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, dof) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)
