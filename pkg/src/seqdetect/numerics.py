"""Scalar numerics shared across the detector engines.

Gaussian tail utilities follow the clamped convention used by the
calibration equations: the inverse tail is zero at and above 1/2.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr


def erf_tail(s: float | np.ndarray) -> float | np.ndarray:
    """Standard normal upper-tail probability P(Z >= s)."""
    return ndtr(-np.asarray(s, dtype=float)) if np.ndim(s) else float(ndtr(-s))


def _phi(s: float) -> float:
    return math.exp(-0.5 * s * s) / math.sqrt(2.0 * math.pi)


def erfinv(kappa: float) -> float:
    """Clamped inverse of the normal upper tail.

    Returns the smallest r with ``erf_tail(r) <= kappa``; zero for
    ``kappa >= 1/2``. Solved by bisection with a Newton polish on the
    tail integral itself so the clamp semantics are exact.

    Parameters
    ----------
    kappa : float
        Target tail probability, must be positive.
    """
    if kappa <= 0.0:
        raise ValueError("tail probability must be positive")
    if kappa >= 0.5:
        return 0.0
    lo, hi = 0.0, 1.0
    while erf_tail(hi) > kappa:
        hi *= 2.0
        if hi > 1e3:  # pragma: no cover - kappa this small underflows first
            break
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if erf_tail(mid) > kappa:
            lo = mid
        else:
            hi = mid
    r = 0.5 * (lo + hi)
    for _ in range(4):
        f = erf_tail(r) - kappa
        d = _phi(r)
        if d <= 0.0:
            break
        step = f / d
        r += step
        if abs(step) < 1e-15 * max(1.0, r):
            break
    return max(r, 0.0)


def bisect_monotone(
    f,
    target: float,
    lo: float,
    hi: float,
    *,
    f_tol: float = 1e-8,
    x_rtol: float = 1e-6,
    max_iter: int = 200,
    decreasing: bool = True,
) -> float:
    """Find x in [lo, hi] with f(x) = target for monotone f.

    ``decreasing`` states the direction of f; a detected violation of
    monotonicity beyond ``f_tol`` raises, per the calibration contract
    (surfaced, not silently fixed).
    """
    flo, fhi = f(lo), f(hi)
    sign = -1.0 if decreasing else 1.0
    if sign * (flo - fhi) > f_tol:
        raise NonMonotoneError(f"f({lo})={flo}, f({hi})={fhi}")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm - target) <= f_tol and (hi - lo) <= x_rtol * max(abs(mid), 1.0):
            return mid
        if (fm > target) == decreasing:
            lo = mid
        else:
            hi = mid
        if (hi - lo) <= x_rtol * max(abs(mid), 1e-12) and abs(fm - target) <= f_tol:
            return 0.5 * (lo + hi)
    return 0.5 * (lo + hi)


class NonMonotoneError(RuntimeError):
    """Raised when a bisection target function moves the wrong way."""


def sqrtm_psd(M: np.ndarray, rel_floor: float = 1e-12) -> np.ndarray:
    """Symmetric PSD square root; eigenvalues below rel_floor*max are dropped."""
    M = np.asarray(M, dtype=float)
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    top = float(w.max(initial=0.0))
    w = np.where(w > rel_floor * max(top, 1e-300), w, 0.0)
    return (V * np.sqrt(w)) @ V.T


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """Wilson 95% score interval for a binomial proportion."""
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent generators for n parallel trials, reproducible by seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
