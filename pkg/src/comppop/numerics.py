"""Probability kernels shared by every other module.

Univariate normal and Student-t distribution functions, a multivariate
normal rectangle probability evaluated by randomized quasi-Monte Carlo on
the Cholesky-transformed integrand, equicoordinate critical values, and a
bracketed search for the smallest integer satisfying a monotone predicate.

All functions are pure and safe to call from multiple workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri, stdtr

__all__ = [
    "CorrelationMatrix",
    "MvnSettings",
    "MvnResult",
    "NumericsError",
    "BracketError",
    "SearchCeilingError",
    "normal_cdf",
    "normal_quantile",
    "t_cdf",
    "t_sf",
    "mvn_cdf",
    "equicoordinate_upper",
    "smallest_n_satisfying",
]

# Default scrambling seed: critical values must be bit-reproducible
# run-to-run unless the caller overrides the seed.
_DEFAULT_MVN_SEED = 20230817

_PSD_TOL = 1e-10


class NumericsError(ValueError):
    """Invalid input to a numerical kernel."""


class BracketError(NumericsError):
    """Root bracketing failed; the inputs do not admit a root."""


class SearchCeilingError(NumericsError):
    """Monotone search hit its ceiling without the predicate turning true."""


def normal_cdf(x: float) -> float:
    """Standard normal CDF, absolute error below 1e-12."""
    return float(ndtr(x))


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF for p in the open unit interval."""
    if not 0.0 < p < 1.0:
        raise NumericsError(f"normal_quantile requires 0 < p < 1, got {p}")
    return float(ndtri(p))


def t_cdf(x: float, df: float) -> float:
    """Student-t CDF with df >= 1, via the regularized incomplete beta."""
    if df < 1:
        raise NumericsError(f"t_cdf requires df >= 1, got {df}")
    return float(stdtr(df, x))


def t_sf(x, df):
    """Student-t upper tail probability; keeps precision for large x."""
    return stdtr(df, np.negative(x))


@dataclass(frozen=True)
class CorrelationMatrix:
    """Validated correlation matrix: symmetric, unit diagonal, PSD."""

    entries: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise NumericsError("correlation matrix must be square")
        if not np.allclose(m, m.T, atol=1e-12):
            raise NumericsError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(m), 1.0, atol=1e-12):
            raise NumericsError("correlation matrix must have unit diagonal")
        off = m - np.eye(m.shape[0])
        if np.any(np.abs(off) > 1.0 + 1e-12):
            raise NumericsError("off-diagonal correlations must lie in [-1, 1]")
        if np.linalg.eigvalsh(m).min() < -_PSD_TOL * m.shape[0]:
            raise NumericsError("correlation matrix is not positive semi-definite")
        # store a defensive copy, symmetrized
        object.__setattr__(self, "entries", (m + m.T) / 2.0)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def submatrix(self, indices) -> "CorrelationMatrix":
        idx = np.asarray(list(indices), dtype=int)
        return CorrelationMatrix(self.entries[np.ix_(idx, idx)])

    @classmethod
    def identity(cls, dim: int) -> "CorrelationMatrix":
        return cls(np.eye(dim))


@dataclass(frozen=True)
class MvnSettings:
    """Accuracy and reproducibility knobs for the MVN integrator."""

    abs_tolerance: float = 1e-6
    max_evaluations: int = 2**20
    rng_seed: int = _DEFAULT_MVN_SEED

    def __post_init__(self):
        if self.abs_tolerance <= 0:
            raise NumericsError("abs_tolerance must be positive")
        if self.max_evaluations < 1000:
            raise NumericsError("max_evaluations must be at least 1000")


@dataclass(frozen=True)
class MvnResult:
    value: float
    error_estimate: float
    evaluations: int
    converged: bool


_SQRT_PRIMES = np.sqrt(np.array(
    [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47], dtype=float))


def _reduce_degenerate(corr: np.ndarray, upper: np.ndarray, lower: np.ndarray):
    """Fold coordinates tied by |rho| = 1 into a single coordinate.

    For rho = +1 the tighter limits win; for rho = -1 the partner's upper
    limit becomes a lower limit on the kept coordinate.
    """
    n = corr.shape[0]
    keep = list(range(n))
    i = 0
    while i < len(keep):
        j = i + 1
        while j < len(keep):
            a, b = keep[i], keep[j]
            rho = corr[a, b]
            if rho >= 1.0 - 1e-12:
                upper[a] = min(upper[a], upper[b])
                lower[a] = max(lower[a], lower[b])
                del keep[j]
            elif rho <= -1.0 + 1e-12:
                upper[a] = min(upper[a], -lower[b])
                lower[a] = max(lower[a], -upper[b])
                del keep[j]
            else:
                j += 1
        i += 1
    idx = np.array(keep, dtype=int)
    return corr[np.ix_(idx, idx)], upper[idx], lower[idx]


def _ordered_cholesky(corr: np.ndarray, upper: np.ndarray, lower: np.ndarray):
    """Cholesky factor with greedy variable reordering.

    At each step the remaining variable with the smallest conditional
    interval probability is pivoted next (Gibson/Glasbey/Elston ordering),
    which concentrates the hardest constraints early in the integrand.
    """
    n = corr.shape[0]
    c = corr.copy()
    a = lower.copy()
    b = upper.copy()
    L = np.zeros((n, n))
    y = np.zeros(n)

    for k in range(n):
        best, best_p = k, np.inf
        for j in range(k, n):
            s = c[j, j] - np.dot(L[j, :k], L[j, :k])
            s = np.sqrt(max(s, 1e-14))
            mu = np.dot(L[j, :k], y[:k])
            p = ndtr((b[j] - mu) / s) - ndtr((a[j] - mu) / s)
            if p < best_p:
                best, best_p = j, p
        if best != k:
            for arr in (a, b):
                arr[[k, best]] = arr[[best, k]]
            c[[k, best], :] = c[[best, k], :]
            c[:, [k, best]] = c[:, [best, k]]
            L[[k, best], :k] = L[[best, k], :k]

        s2 = c[k, k] - np.dot(L[k, :k], L[k, :k])
        L[k, k] = np.sqrt(max(s2, 1e-14))
        for j in range(k + 1, n):
            L[j, k] = (c[j, k] - np.dot(L[j, :k], L[k, :k])) / L[k, k]

        # conditional expectation of the truncated pivot, used by the
        # ordering heuristic at later steps
        mu = np.dot(L[k, :k], y[:k])
        alpha = (a[k] - mu) / L[k, k]
        beta = (b[k] - mu) / L[k, k]
        denom = max(ndtr(beta) - ndtr(alpha), 1e-300)
        y[k] = (_phi(alpha) - _phi(beta)) / denom

    return L, a, b


def _phi(x):
    return np.exp(-0.5 * np.square(x)) / np.sqrt(2.0 * np.pi)


def _qmc_batch(L, a, b, shift, n_points):
    """Mean of the Genz integrand over one randomly shifted lattice."""
    n = L.shape[0]
    j = np.arange(1, n_points + 1, dtype=float)[:, None]
    w = np.abs(2.0 * np.modf(j * _SQRT_PRIMES[: n - 1] + shift)[0] - 1.0)

    d = ndtr(a[0] / L[0, 0])
    e = ndtr(b[0] / L[0, 0])
    f = np.full(n_points, e - d)
    prev_d, prev_e = d, e
    ys = np.empty((n_points, n - 1))
    for i in range(1, n):
        u = prev_d + w[:, i - 1] * (prev_e - prev_d)
        ys[:, i - 1] = ndtri(np.clip(u, 1e-300, 1.0 - 1e-16))
        mu = ys[:, :i] @ L[i, :i]
        prev_d = ndtr((a[i] - mu) / L[i, i])
        prev_e = ndtr((b[i] - mu) / L[i, i])
        f *= prev_e - prev_d
    return float(f.mean())


def mvn_cdf(upper, corr: CorrelationMatrix, settings: MvnSettings | None = None,
            lower=None) -> MvnResult:
    """P(lower < Z <= upper) for Z ~ N(0, corr).

    Randomized quasi-Monte Carlo (shifted Kronecker lattices on the
    Cholesky-transformed integrand with variable reordering). Deterministic
    given settings.rng_seed; the reported error estimate is three times the
    standard error over the random shifts.
    """
    settings = settings or MvnSettings()
    u = np.asarray(upper, dtype=float).copy()
    if u.shape != (corr.dim,):
        raise NumericsError("upper must have one entry per dimension")
    lo = (np.full(corr.dim, -np.inf) if lower is None
          else np.asarray(lower, dtype=float).copy())
    if np.any(np.isnan(u)) or np.any(np.isnan(lo)):
        raise NumericsError("limits must not be NaN")

    c, u, lo = _reduce_degenerate(corr.entries.copy(), u, lo)
    if np.any(lo >= u):
        return MvnResult(0.0, 0.0, 0, True)
    n = c.shape[0]
    if n == 1:
        v = float(ndtr(u[0]) - ndtr(lo[0]))
        return MvnResult(max(v, 0.0), 0.0, 1, True)

    L, a, b = _ordered_cholesky(c, u, lo)

    rng = np.random.default_rng(settings.rng_seed)
    n_shifts = 12
    n_points = 256
    total = 0
    means: list[float] = []
    while True:
        for _ in range(n_shifts):
            shift = rng.random(n - 1)
            means.append(_qmc_batch(L, a, b, shift, n_points))
            total += n_points
        value = float(np.mean(means))
        err = 3.0 * float(np.std(means, ddof=1)) / np.sqrt(len(means))
        if err <= settings.abs_tolerance:
            return MvnResult(min(max(value, 0.0), 1.0), err, total, True)
        if total * 2 > settings.max_evaluations:
            return MvnResult(min(max(value, 0.0), 1.0), err, total, False)
        n_points *= 2


def equicoordinate_upper(corr: CorrelationMatrix, alpha: float,
                         settings: MvnSettings | None = None) -> float:
    """Common threshold c with P(any Z_r >= c) = alpha under N(0, corr).

    Solved by bisection on the exceedance probability; the tolerance is
    1e-6 in probability units, which is what matters downstream.
    """
    if not 0.0 < alpha < 0.5:
        raise NumericsError(f"alpha must be in (0, 0.5), got {alpha}")
    settings = settings or MvnSettings()
    if corr.dim == 1:
        return normal_quantile(1.0 - alpha)

    inner = MvnSettings(abs_tolerance=min(settings.abs_tolerance, 2.5e-7),
                        max_evaluations=max(settings.max_evaluations, 2**21),
                        rng_seed=settings.rng_seed)

    def exceed(c: float) -> float:
        u = np.full(corr.dim, c)
        return 1.0 - mvn_cdf(u, corr, inner).value

    lo, hi = 0.0, 10.0
    f_lo, f_hi = exceed(lo) - alpha, exceed(hi) - alpha
    while f_hi > 0.0:
        lo, f_lo = hi, f_hi
        hi *= 2.0
        if hi > 64.0:
            raise BracketError("no equicoordinate root below 64")
        f_hi = exceed(hi) - alpha
    if f_lo < 0.0:
        raise BracketError("exceedance already below alpha at c = 0")

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = exceed(mid) - alpha
        if abs(f_mid) <= 1e-6 or hi - lo < 1e-10:
            return mid
        if f_mid > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def smallest_n_satisfying(predicate, lower: int, ceiling: int = 10**7) -> int:
    """Smallest integer n >= lower with predicate(n) true.

    The caller guarantees the predicate is monotone (false below some
    threshold, true at and above it). Geometric expansion locates an upper
    bracket, then binary search pins the threshold.
    """
    lower = int(lower)
    if predicate(lower):
        return lower
    lo = lower  # predicate false here
    hi = max(2 * lower, lower + 1)
    while not predicate(hi):
        lo = hi
        hi *= 2
        if hi > ceiling:
            raise SearchCeilingError(
                f"predicate still false at ceiling {ceiling}")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if predicate(mid):
            hi = mid
        else:
            lo = mid
    return hi
