"""Distribution quantiles by bisection on regularized incomplete gamma/beta functions."""

from __future__ import annotations

import math

import numpy as np
from scipy import special

_TOL = 1e-10


def _bisect(cdf, target: float, lo: float, hi: float, tol: float = _TOL) -> float:
    while cdf(hi) < target:
        lo, hi = hi, hi * 2.0
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def _check_q(q: float) -> None:
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q}")


def chi2_cdf(x: float, df: int) -> float:
    return float(special.gammainc(df / 2.0, max(x, 0.0) / 2.0))


def chi2_quantile(q: float, df: int) -> float:
    _check_q(q)
    return _bisect(lambda x: chi2_cdf(x, df), q, 0.0, max(1.0, float(df)))


def f_cdf(x: float, d1: int, d2: int) -> float:
    if x <= 0:
        return 0.0
    return float(special.betainc(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2)))


def f_quantile(q: float, d1: int, d2: int) -> float:
    _check_q(q)
    return _bisect(lambda x: f_cdf(x, d1, d2), q, 0.0, 1.0)


def hotelling_t2_quantile(q: float, n: int, dof: int) -> float:
    """Quantile of Hotelling's T^2(n, dof), via T^2 = n dof / (dof - n + 1) F(n, dof - n + 1)."""
    if dof - n + 1 <= 0:
        raise ValueError(f"Hotelling T^2 needs dof >= n (got n={n}, dof={dof})")
    return n * dof / (dof - n + 1) * f_quantile(q, n, dof - n + 1)


def normal_quantile(q: float) -> float:
    _check_q(q)
    return float(special.ndtri(q))


def upper_critical_level(p: float, one_sided: bool = False) -> float:
    """CDF level whose upper tail is (1-p)/2, or 1-p with ``one_sided``."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {p}")
    return p if one_sided else 1.0 - (1.0 - p) / 2.0


def binomial_lower_bound(successes: int, trials: int, confidence: float = 0.99) -> float:
    """One-sided Clopper-Pearson lower confidence bound on a binomial proportion."""
    if trials < 1 or not 0 <= successes <= trials:
        raise ValueError("need 0 <= successes <= trials and trials >= 1")
    if successes == 0:
        return 0.0
    alpha = 1.0 - confidence
    return float(special.betaincinv(successes, trials - successes + 1, alpha))


def binomial_standard_error(p_hat: float, trials: int) -> float:
    return math.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / trials)


def moving_average(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if len(values) < window:
        return values.copy()
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")
