"""Sample size calculation for composite-population designs.

The planned trial's composite statistics are approximately multivariate
normal under the assumed alternative: the mean vector comes from plugging
per-subset noncentralities into the combination rule, and the covariance is
estimated once by simulating whole trials under the planning assumptions.
Disjunctive power (reject at least one composite hypothesis at the common
critical value) is then a multivariate normal orthant probability, and the
required size is the smallest integer meeting the target.

The noncentrality keeps the adjusted-effect variance bracket at its
expectation: the covariate mean-difference quadratic form does not vanish
at planning sizes, it contributes D/(n_j - 2) relative to 1/N_T + 1/N_C.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _trials
from .design import DesignError, DesignSpec, SubsetAssumptions, subset_sizes
from .inference import null_covariance
from .numerics import (
    CorrelationMatrix,
    MvnSettings,
    equicoordinate_upper,
    mvn_cdf,
    smallest_n_satisfying,
)

__all__ = [
    "AlternativeModel",
    "PowerResult",
    "SampleSizeResult",
    "estimate_sigma_a",
    "mean_shift",
    "subset_noncentrality",
    "disjunctive_power",
    "required_sample_size",
    "planning_floor",
]

DEFAULT_SIGMA_A_RUNS = 10_000
DEFAULT_SIGMA_A_SEED = 74230561
_CHUNK = 2048


@dataclass(frozen=True)
class AlternativeModel:
    """Joint law of the composite statistics under the planning alternative."""

    sigma_a: CorrelationMatrix
    runs: int
    per_run_n: int
    seed: int
    psd_adjustment: float = 0.0  # largest eigenvalue clipped during repair


@dataclass(frozen=True)
class PowerResult:
    n: int
    power: float
    critical_value: float
    floor: int


@dataclass(frozen=True)
class SampleSizeResult:
    n0: int
    power: PowerResult
    alternative: AlternativeModel
    sigma0: CorrelationMatrix
    critical_value: float
    floor: int
    treated: tuple
    control: tuple


def planning_floor(spec: DesignSpec) -> int:
    """Smallest total size keeping every subset's test df at least one."""
    need = 3 + spec.n_covariates
    return max(int(np.ceil(need / tau)) for tau in spec.prevalences)


def subset_noncentrality(spec: DesignSpec, assume: SubsetAssumptions, n: float):
    """Expected subset t statistics at real-valued total size n."""
    tau = np.asarray(spec.prevalences)
    nj = n * tau
    d = spec.n_covariates
    if np.any(nj - 2 - d < 1):
        raise DesignError(
            f"n={n} violates the per-subset floor n*tau_j - 2 - D >= 1")
    n_t = nj * spec.kappa / (1.0 + spec.kappa)
    n_c = nj / (1.0 + spec.kappa)
    df_factor = (nj - 2) / (nj - 2 - d)
    imbalance = 1.0 + d / (nj - 2)
    v = (1.0 - np.asarray(assume.rho_sq)) * np.asarray(assume.outcome_variances)
    variance = df_factor * v * (1.0 / n_t + 1.0 / n_c) * imbalance
    return np.asarray(assume.effects) / np.sqrt(variance)


def mean_shift(spec: DesignSpec, assume: SubsetAssumptions, n: float):
    """Expected composite statistics at total size n."""
    delta = subset_noncentrality(spec, assume, n)
    w = np.asarray(spec.weights)
    out = np.empty(spec.n_composites)
    for r, comp in enumerate(spec.composites):
        idx = sorted(comp)
        coeff = np.sqrt(w[idx] / w[idx].sum())
        out[r] = coeff @ delta[idx]
    return out


def estimate_sigma_a(spec: DesignSpec, assume: SubsetAssumptions,
                     runs: int = DEFAULT_SIGMA_A_RUNS,
                     per_run_n: int | None = None,
                     seed: int = DEFAULT_SIGMA_A_SEED) -> AlternativeModel:
    """Correlation of the composite statistics under the assumed alternative.

    Simulates `runs` full trials of per_run_n subjects at the planning
    assumptions, analyses each like the real trial, and takes the empirical
    correlation of the composite statistics. Done once per planning task.
    When per_run_n is omitted, trials are simulated at the first-pass
    required size computed from the null covariance, so the correlations
    reflect trial-scale effect magnitudes.
    """
    if runs < 1000:
        raise DesignError("sigma_a estimation needs at least 1000 runs")
    if per_run_n is None:
        per_run_n = _first_pass_size(spec, assume, spec.target_power)
    per_run_n = max(int(per_run_n), planning_floor(spec))

    layout = _trials.trial_layout(spec, per_run_n)
    params = _trials.TrueParams.from_assumptions(assume)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    d = spec.n_covariates

    z_rows = []
    done = 0
    while done < runs:
        batch = min(_CHUNK, runs - done)
        p_cols = np.empty((batch, spec.n_subsets))
        for j, (n_t, n_c) in enumerate(layout):
            y, x, arm = _trials.draw_subset_batch(rng, j, n_t, n_c, params, d, batch)
            _, p, _ = _trials.batch_fit(y, x, arm)
            p_cols[:, j] = p
        z_rows.append(_trials.combine_batch(p_cols, spec,
                                            clamp_bounds=(1e-300, 1.0 - 1e-16)))
        done += batch
    z = np.concatenate(z_rows, axis=0)

    if spec.n_composites == 1:
        return AlternativeModel(CorrelationMatrix.identity(1), runs, per_run_n, seed)

    corr = np.corrcoef(z, rowvar=False)
    corr = (corr + corr.T) / 2.0
    np.fill_diagonal(corr, 1.0)
    eigvals, eigvecs = np.linalg.eigh(corr)
    adjustment = float(max(0.0, -eigvals.min()))
    if eigvals.min() < 0:
        eigvals = np.clip(eigvals, 0.0, None)
        corr = eigvecs @ np.diag(eigvals) @ eigvecs.T
        scale = np.sqrt(np.diag(corr))
        corr = corr / np.outer(scale, scale)
        np.fill_diagonal(corr, 1.0)
    return AlternativeModel(CorrelationMatrix(corr), runs, per_run_n, seed,
                            psd_adjustment=adjustment)


def _first_pass_size(spec: DesignSpec, assume: SubsetAssumptions,
                     target: float) -> int:
    """Required size using the null covariance as a stand-in for sigma_A."""
    sigma0 = null_covariance(spec)
    alt = AlternativeModel(sigma0, 0, 0, 0)
    settings = MvnSettings()
    c = equicoordinate_upper(sigma0, spec.alpha, settings)
    floor = planning_floor(spec)

    def ok(n: int) -> bool:
        return _power_at(spec, assume, alt, n, c, settings) >= target

    return smallest_n_satisfying(ok, floor)


def _power_at(spec, assume, alt, n, critical_value, settings) -> float:
    z_star = mean_shift(spec, assume, n)
    upper = critical_value - z_star
    return 1.0 - mvn_cdf(upper, alt.sigma_a, settings).value


def disjunctive_power(spec: DesignSpec, assume: SubsetAssumptions,
                      alt: AlternativeModel, n: int,
                      settings: MvnSettings | None = None,
                      critical_value: float | None = None) -> PowerResult:
    """Probability of rejecting at least one composite hypothesis at size n.

    The common critical value comes from the null covariance of the full
    intersection; the exceedance is evaluated under the alternative model.
    """
    settings = settings or MvnSettings()
    if critical_value is None:
        critical_value = equicoordinate_upper(null_covariance(spec), spec.alpha,
                                              settings)
    floor = planning_floor(spec)
    power = _power_at(spec, assume, alt, n, critical_value, settings)
    return PowerResult(n=int(n), power=float(power),
                       critical_value=float(critical_value), floor=floor)


def required_sample_size(spec: DesignSpec, assume: SubsetAssumptions,
                         target_power: float | None = None,
                         settings: MvnSettings | None = None,
                         alt: AlternativeModel | None = None,
                         sigma_a_runs: int = DEFAULT_SIGMA_A_RUNS,
                         per_run_n: int | None = None,
                         seed: int = DEFAULT_SIGMA_A_SEED) -> SampleSizeResult:
    """Smallest total size meeting the disjunctive power target.

    The alternative covariance is estimated once (unless supplied), the
    power curve uses real-valued arm sizes so it is monotone, and the search
    starts at the per-subset df floor.
    """
    target = spec.target_power if target_power is None else float(target_power)
    if not 0.0 < target < 1.0:
        raise DesignError("target power must lie in (0, 1)")
    settings = settings or MvnSettings()
    sigma0 = null_covariance(spec)
    c = equicoordinate_upper(sigma0, spec.alpha, settings)
    if alt is None:
        if per_run_n is None:
            per_run_n = _first_pass_size(spec, assume, target)
        alt = estimate_sigma_a(spec, assume, runs=sigma_a_runs,
                               per_run_n=per_run_n, seed=seed)
    floor = planning_floor(spec)

    def ok(n: int) -> bool:
        return _power_at(spec, assume, alt, n, c, settings) >= target

    n0 = smallest_n_satisfying(ok, floor)
    power = disjunctive_power(spec, assume, alt, n0, settings, critical_value=c)
    treated, control = subset_sizes(spec, n0)
    return SampleSizeResult(
        n0=n0,
        power=power,
        alternative=alt,
        sigma0=sigma0,
        critical_value=float(c),
        floor=floor,
        treated=tuple(int(v) for v in treated),
        control=tuple(int(v) for v in control),
    )
