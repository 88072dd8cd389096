"""Shapiro-Wilk W statistic with Royston's coefficient approximation."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtri

from .numeric import ParamVector, RngStream

MAX_N = 5000

# Polynomial corrections in u = 1/sqrt(n) for the two extreme coefficients,
# lowest degree first (Royston 1992).
_C_LAST = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C_PENULT = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)


@dataclass(frozen=True)
class NormalityReport:
    W: float
    n: int
    subsampled: bool = False


@lru_cache(maxsize=64)
def _coefficients(n: int) -> np.ndarray:
    """Antisymmetric weights a_1..a_n for the ordered sample."""
    if n == 3:
        r = np.sqrt(0.5)
        return np.array([-r, 0.0, r])
    i = np.arange(1, n + 1)
    m = ndtri((i - 0.375) / (n + 0.25))
    mm = float(m @ m)
    u = 1.0 / np.sqrt(n)
    a = np.empty(n)
    a_n = m[-1] / np.sqrt(mm) + np.polynomial.polynomial.polyval(u, _C_LAST)
    if n > 5:
        a_n1 = m[-2] / np.sqrt(mm) + np.polynomial.polynomial.polyval(u, _C_PENULT)
        phi = (mm - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * a_n ** 2 - 2 * a_n1 ** 2)
        a[2:-2] = m[2:-2] / np.sqrt(phi)
        a[[0, 1, -2, -1]] = [-a_n, -a_n1, a_n1, a_n]
    else:
        phi = (mm - 2 * m[-1] ** 2) / (1 - 2 * a_n ** 2)
        a[1:-1] = m[1:-1] / np.sqrt(phi)
        a[[0, -1]] = [-a_n, a_n]
    a.flags.writeable = False
    return a


def coordinate_subsample(v: ParamVector | np.ndarray, cap: int, stream: RngStream) -> np.ndarray:
    """All coordinates if there are at most ``cap``; else ``cap`` distinct ones, uniformly."""
    if cap < 3:
        raise ValueError("cap must be at least 3")
    x = v.values if isinstance(v, ParamVector) else np.asarray(v, dtype=np.float64).ravel()
    if x.size <= cap:
        return x.copy()
    idx = np.sort(stream.generator().choice(x.size, size=cap, replace=False))
    return x[idx]


def shapiro_w(sample, stream: RngStream | None = None, cap: int = MAX_N) -> NormalityReport:
    """Shapiro-Wilk W of ``sample``.

    Samples longer than ``cap`` are subsampled with ``stream``; W is only
    defined for 3 <= n <= 5000. A constant sample raises ``ValueError``.
    """
    x = sample.values if isinstance(sample, ParamVector) else np.asarray(sample, dtype=np.float64).ravel()
    subsampled = False
    if x.size > cap:
        if stream is None:
            raise ValueError(f"sample of size {x.size} exceeds {cap}; pass a stream to subsample")
        x = coordinate_subsample(x, cap, stream)
        subsampled = True
    n = x.size
    if n < 3:
        raise ValueError("Shapiro-Wilk needs at least 3 observations")
    if n > MAX_N:
        raise ValueError(f"Shapiro-Wilk approximation is only valid up to n={MAX_N}")
    xs = np.sort(x)
    centred = xs - xs.mean()
    ss = float(centred @ centred)
    if ss <= 0.0 or xs[-1] - xs[0] <= 1e-19 * max(1.0, abs(xs[0])):
        raise ValueError("zero-variance sample")
    a = _coefficients(n)
    num = float(a @ centred) ** 2
    return NormalityReport(W=min(num / ss, 1.0), n=n, subsampled=subsampled)
