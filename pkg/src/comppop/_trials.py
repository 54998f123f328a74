"""Batched trial generation and analysis kernels.

The Monte Carlo work in this package (alternative-covariance estimation,
operating-characteristic studies) runs thousands of independent trials with
identical shapes. These kernels draw whole batches of trials per subset and
fit the subset regressions with stacked linear algebra, while every run
consumes its own counter-derived substream so that results are identical
for any batch split or worker count.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

from .design import DesignSpec, subset_sizes
from .inference import P_CLAMP_HI, P_CLAMP_LO, InferenceError
from .numerics import t_sf

__all__ = [
    "TrueParams",
    "run_rng",
    "draw_subset_batch",
    "batch_fit",
    "batch_blinded_fit",
    "combine_batch",
]


class TrueParams:
    """Data-generating parameters, one entry per subset.

    effects apply to treated subjects only; covariates are centered normal
    with the given variances; the residual scale is set so the squared
    multiple correlation between outcome and covariates equals rho_sq.
    """

    def __init__(self, effects, outcome_variances, rho_sq, covariate_variances=None):
        self.effects = np.asarray(effects, dtype=float)
        self.outcome_variances = np.asarray(outcome_variances, dtype=float)
        self.rho_sq = np.asarray(rho_sq, dtype=float)
        J = self.effects.shape[0]
        self.covariate_variances = (np.ones(J) if covariate_variances is None
                                    else np.asarray(covariate_variances, dtype=float))
        if np.any(self.outcome_variances <= 0) or np.any(self.covariate_variances <= 0):
            raise ValueError("variances must be positive")
        if np.any((self.rho_sq < 0) | (self.rho_sq >= 1)):
            raise ValueError("rho_sq must lie in [0, 1)")

    @classmethod
    def from_assumptions(cls, assume):
        return cls(assume.effects, assume.outcome_variances, assume.rho_sq,
                   assume.covariate_variances)

    def gamma(self, j: int, n_covariates: int):
        """Covariate coefficients splitting rho_sq equally across covariates."""
        if n_covariates == 0:
            return np.zeros(0)
        sd_y = np.sqrt(self.outcome_variances[j])
        sd_x = np.sqrt(self.covariate_variances[j])
        return np.full(n_covariates,
                       np.sqrt(self.rho_sq[j] / n_covariates) * sd_y / sd_x)

    def residual_sd(self, j: int) -> float:
        return float(np.sqrt(self.outcome_variances[j] * (1.0 - self.rho_sq[j])))


def run_rng(seed: int, *stream) -> np.random.Generator:
    """Independent generator for one (scenario, run, stage, ...) address.

    Philox keyed through SeedSequence spawn keys: serial and parallel
    execution consume identical streams.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def draw_subset_batch(rng, j: int, n_t: int, n_c: int, params: TrueParams,
                      n_covariates: int, batch: int):
    """Draw `batch` independent trials of one subset.

    Returns (y, x, arm) with shapes (batch, n), (batch, n, D), (n,). The
    draw order is fixed (covariates, then residuals) so any code path
    consuming the same generator reproduces the same subjects.
    """
    n = n_t + n_c
    d = n_covariates
    sd_x = np.sqrt(params.covariate_variances[j])
    x = rng.standard_normal((batch, n, d)) * sd_x if d else np.zeros((batch, n, 0))
    e = rng.standard_normal((batch, n)) * params.residual_sd(j)
    arm = np.concatenate([np.ones(n_t), np.zeros(n_c)])
    y = params.effects[j] * arm + e
    if d:
        y = y + x @ params.gamma(j, d)
    return y, x, arm


def batch_fit(y, x, arm):
    """Stacked OLS of y on [1, arm, x] for a batch of same-shape trials.

    Returns (t_statistics, p_values, df) arrays of length batch. Matches
    inference.fit_subset exactly on each slice.
    """
    batch, n = y.shape
    d = x.shape[2]
    df = n - 2 - d
    if df < 1:
        raise InferenceError(f"insufficient degrees of freedom ({df})")
    ones = np.broadcast_to(np.ones(n), (batch, n))
    u = np.broadcast_to(arm, (batch, n))
    design = np.concatenate([ones[..., None], u[..., None], x], axis=2)
    g = np.einsum("bni,bnj->bij", design, design)
    h = np.einsum("bni,bn->bi", design, y)
    coef = np.linalg.solve(g, h[..., None])[..., 0]
    resid = y - np.einsum("bni,bi->bn", design, coef)
    s2 = np.einsum("bn,bn->b", resid, resid) / df
    g_inv_uu = np.linalg.inv(g)[:, 1, 1]
    se = np.sqrt(s2 * g_inv_uu)
    t = coef[:, 1] / se
    p = t_sf(t, df)
    return t, p, df


def batch_blinded_fit(y, x):
    """Stacked OLS of y on [1, x] ignoring arms, for blinded re-estimation.

    Returns (residual_variance, r_sq, outcome_variance) per run, with the
    residual variance on n - 1 - D denominators.
    """
    batch, n = y.shape
    d = x.shape[2]
    df = n - 1 - d
    if df < 1:
        raise InferenceError(f"insufficient blinded degrees of freedom ({df})")
    yc = y - y.mean(axis=1, keepdims=True)
    tss = np.einsum("bn,bn->b", yc, yc)
    if d:
        xc = x - x.mean(axis=1, keepdims=True)
        g = np.einsum("bni,bnj->bij", xc, xc)
        h = np.einsum("bni,bn->bi", xc, yc)
        coef = np.linalg.solve(g, h[..., None])[..., 0]
        rss = tss - np.einsum("bi,bi->b", h, coef)
    else:
        rss = tss
    rss = np.maximum(rss, 0.0)
    resid_var = rss / df
    r_sq = np.where(tss > 0, 1.0 - rss / np.maximum(tss, 1e-300), 0.0)
    outcome_var = tss / (n - 1)
    return resid_var, np.clip(r_sq, 0.0, 1.0 - 1e-12), outcome_var


def combine_batch(p_matrix, spec: DesignSpec, clamp_bounds=(P_CLAMP_LO, P_CLAMP_HI)):
    """Composite statistics for a (batch, J) matrix of subset p-values."""
    p = np.clip(p_matrix, clamp_bounds[0], clamp_bounds[1])
    z_subset = -ndtri(p)
    w = np.asarray(spec.weights)
    out = np.empty((p.shape[0], spec.n_composites))
    for r, comp in enumerate(spec.composites):
        idx = sorted(comp)
        coeff = np.sqrt(w[idx] / w[idx].sum())
        out[:, r] = z_subset[:, idx] @ coeff
    return out


def trial_layout(spec: DesignSpec, total_n: int):
    """Integer per-subset arm sizes for one trial of total_n subjects."""
    treated, control = subset_sizes(spec, total_n)
    return [(int(t), int(c)) for t, c in zip(treated, control)]
