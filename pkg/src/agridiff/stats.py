"""Pearson correlation and paired t-test, with a self-contained Student-t tail."""

from __future__ import annotations

import math

import numpy as np


class DegenerateDataError(ValueError):
    """Statistic undefined for the given data (e.g. zero variance)."""


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("pearson needs two 1-D arrays of equal length")
    if len(a) < 2:
        raise DegenerateDataError("need at least two points")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        raise DegenerateDataError("zero variance: correlation undefined")
    # one square root of the product keeps exactly collinear inputs at exactly +-1
    return float(np.clip(float(da @ db) / math.sqrt(saa * sbb), -1.0, 1.0))


def _betacf(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-15) -> float:
    """Continued fraction for the regularized incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t) of Student's t."""
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return tail if t >= 0 else 1.0 - tail


def paired_t_test(a, b, alternative: str = "two-sided") -> tuple[float, float]:
    """Paired t-test on ``a - b`` -> ``(t, p)``; ``alternative`` is 'two-sided' or 'greater'."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = len(d)
    if n < 2:
        raise DegenerateDataError("need at least two pairs")
    if np.all(d == 0):
        return 0.0, 1.0
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise DegenerateDataError("differences have zero variance")
    t = float(d.mean() / (sd / math.sqrt(n)))
    if alternative == "two-sided":
        p = min(1.0, 2.0 * t_sf(abs(t), n - 1))
    elif alternative == "greater":
        p = t_sf(t, n - 1)
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    return t, p
