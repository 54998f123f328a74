"""Subset-level tests and their combination into composite-population tests.

Per subset, the treatment effect is estimated by OLS of the outcome on an
intercept, the treatment indicator and the baseline covariates. The variance
of the adjusted effect is assembled from pooled within-arm moments, whose
bracket term (1/N_T + 1/N_C plus the covariate-imbalance quadratic form)
reproduces the OLS standard error exactly. Subset p-values are combined by
the inverse normal rule into composite statistics, whose joint null law is
multivariate normal with a covariance driven purely by subset overlap.
Family-wise error control is by closed testing with a common equicoordinate
critical value per intersection.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .design import DesignError, DesignSpec
from .numerics import (
    CorrelationMatrix,
    MvnSettings,
    equicoordinate_upper,
    normal_quantile,
    t_sf,
)

__all__ = [
    "InferenceError",
    "Dataset",
    "SubsetFit",
    "IntersectionResult",
    "ClosedTestReport",
    "CriticalValues",
    "fit_subset",
    "combine",
    "null_covariance",
    "closed_test",
    "critical_values",
    "load_dataset",
]

# Combination needs finite normal quantiles; the register of clamped
# p-values is surfaced on the report.
P_CLAMP_LO = 1e-15
P_CLAMP_HI = 1.0 - 1e-15


class InferenceError(ValueError):
    """Analysis cannot proceed on the given data."""


@dataclass(frozen=True)
class Dataset:
    """Column-wise subject data: subset index, arm (+1 T / 0 C / -1 unknown),
    outcome, covariate matrix."""

    subset: np.ndarray
    arm: np.ndarray
    y: np.ndarray
    x: np.ndarray

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.x.shape[1]

    @property
    def blinded(self) -> bool:
        return bool(np.any(self.arm < 0))

    def for_subset(self, j: int):
        m = self.subset == j
        return self.arm[m], self.y[m], self.x[m]

    def without_arms(self) -> "Dataset":
        """View with treatment allocations concealed."""
        return Dataset(self.subset, np.full(self.n, -1, dtype=int), self.y, self.x)


@dataclass(frozen=True)
class SubsetFit:
    """Adjusted treatment effect test for one subset."""

    effect: float
    variance: float
    t_statistic: float
    df: int
    p_value: float
    rho_sq_hat: float
    covariate_mean_diff: np.ndarray
    covariate_covariance: np.ndarray
    n_treated: int
    n_control: int

    @property
    def std_error(self) -> float:
        return float(np.sqrt(self.variance))


def fit_subset(arm, y, x, n_covariates: int | None = None) -> SubsetFit:
    """OLS fit of one subset's linear model and the adjusted-effect test.

    arm is a 0/1 indicator (1 = treated), y the outcome vector, x the
    (n, D) covariate matrix. The one-sided p-value tests whether the
    treatment effect is positive.
    """
    arm = np.asarray(arm)
    y = np.asarray(y, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != y.shape[0]:
        x = x.T
    if n_covariates is not None and x.shape[1] != n_covariates:
        raise InferenceError(
            f"expected {n_covariates} covariates, data has {x.shape[1]}")
    if np.any(arm < 0):
        raise InferenceError("unblinded analysis requires arm labels")
    n_t = int(np.sum(arm == 1))
    n_c = int(np.sum(arm == 0))
    if n_t == 0 or n_c == 0:
        raise InferenceError("both arms must be present in every subset")
    n, d = y.shape[0], x.shape[1]
    df = n_t + n_c - 2 - d
    if df < 1:
        raise InferenceError(f"insufficient degrees of freedom ({df})")

    design = np.column_stack([np.ones(n), arm.astype(float), x])
    q, r = np.linalg.qr(design)
    diag = np.abs(np.diag(r))
    if np.any(diag < 1e-10 * max(diag.max(), 1.0)):
        raise InferenceError("design matrix is rank deficient")
    coef = np.linalg.solve(r, q.T @ y)
    resid = y - design @ coef
    rss = float(resid @ resid)

    # Pooled within-arm moments; the bracket below equals the OLS
    # [ (X'X)^{-1} ]_uu exactly, so T is exactly t-distributed under the null.
    t_mask = arm == 1
    yc = y.copy()
    yc[t_mask] -= y[t_mask].mean()
    yc[~t_mask] -= y[~t_mask].mean()
    xc = x.copy()
    xc[t_mask] -= x[t_mask].mean(axis=0)
    xc[~t_mask] -= x[~t_mask].mean(axis=0)
    ss_y = float(yc @ yc)
    s_w = xc.T @ xc
    s_xy = xc.T @ yc
    mean_diff = x[t_mask].mean(axis=0) - x[~t_mask].mean(axis=0)

    if d > 0:
        try:
            sol = np.linalg.solve(s_w, s_xy)
            rho_sq_hat = float(s_xy @ sol) / ss_y if ss_y > 0 else 0.0
            mahalanobis = float(mean_diff @ np.linalg.solve(s_w, mean_diff))
        except np.linalg.LinAlgError:
            raise InferenceError("covariate matrix is singular within arms")
    else:
        rho_sq_hat = 0.0
        mahalanobis = 0.0

    bracket = 1.0 / n_t + 1.0 / n_c + mahalanobis
    s2_y = ss_y / (n - 2)
    variance = (n - 2) / df * (1.0 - rho_sq_hat) * s2_y * bracket
    if variance <= 0:
        raise InferenceError("non-positive variance estimate")

    effect = float(coef[1])
    t_stat = effect / np.sqrt(variance)
    p = float(t_sf(t_stat, df))
    # exact-zero RSS data gives p in {0, 1}; keep it inside the open interval
    p = min(max(p, np.finfo(float).tiny), 1.0 - 1e-16)
    cov_x = s_w / (n - 2) if d > 0 else np.zeros((0, 0))
    return SubsetFit(
        effect=effect,
        variance=float(variance),
        t_statistic=float(t_stat),
        df=df,
        p_value=p,
        rho_sq_hat=rho_sq_hat,
        covariate_mean_diff=mean_diff,
        covariate_covariance=cov_x,
        n_treated=n_t,
        n_control=n_c,
    )


def _combination_coefficients(weights, index_set):
    idx = sorted(index_set)
    w = np.array([weights[j] for j in idx], dtype=float)
    return idx, np.sqrt(w / w.sum())


def combine(p_values, weights, index_set, clamp: bool = True):
    """Inverse normal combination of subset p-values over one index set.

    Returns (statistic, clamped_flag). With clamp disabled, p-values at 0
    or 1 raise instead of being pulled into the open interval.
    """
    idx = sorted(index_set)
    if not idx:
        raise InferenceError("index set must be non-empty")
    p = np.array([p_values[j] for j in idx], dtype=float)
    clamped = bool(np.any(p < P_CLAMP_LO) or np.any(p > P_CLAMP_HI))
    if clamped:
        if not clamp:
            raise InferenceError("p-value outside the clamping policy bounds")
        p = np.clip(p, P_CLAMP_LO, P_CLAMP_HI)
    elif np.any(p <= 0.0) or np.any(p >= 1.0):
        raise InferenceError("p-values must lie in (0, 1)")
    _, coeff = _combination_coefficients(weights, idx)
    # Phi^{-1}(1 - p) = -Phi^{-1}(p); the right-hand form keeps precision
    # for small p.
    z = -np.array([normal_quantile(pj) for pj in p])
    return float(coeff @ z), clamped


def null_covariance(spec: DesignSpec) -> CorrelationMatrix:
    """Joint null correlation of the composite statistics.

    Entry (r, r') sums the weights of shared subsets, normalized by the
    composite weight totals; disjoint composites are uncorrelated.
    """
    w = np.asarray(spec.weights, dtype=float)
    R = spec.n_composites
    totals = np.array([w[sorted(c)].sum() for c in spec.composites])
    m = np.eye(R)
    for r in range(R):
        for r2 in range(r + 1, R):
            shared = sorted(spec.composites[r] & spec.composites[r2])
            cov = w[shared].sum() / np.sqrt(totals[r] * totals[r2]) if shared else 0.0
            m[r, r2] = m[r2, r] = cov
    return CorrelationMatrix(m)


@dataclass(frozen=True)
class IntersectionResult:
    members: tuple          # composite indices (0-based) in the intersection
    critical_value: float
    max_statistic: float
    rejected: bool


@dataclass(frozen=True)
class ClosedTestReport:
    statistics: tuple
    alpha: float
    intersections: tuple    # IntersectionResult, one per tested subset of {1..R}
    elementary_rejected: tuple
    clamped: tuple = ()

    def intersection(self, members) -> IntersectionResult:
        key = frozenset(members)
        for res in self.intersections:
            if frozenset(res.members) == key:
                return res
        raise KeyError(f"intersection {sorted(key)} not in report")


class CriticalValues:
    """Equicoordinate critical values for every intersection of composites.

    They depend only on the design and alpha, so simulation loops compute
    them once and reuse them across runs.
    """

    def __init__(self, spec: DesignSpec, settings: MvnSettings | None = None,
                 alpha: float | None = None):
        self.spec = spec
        self.alpha = spec.alpha if alpha is None else alpha
        self.settings = settings or MvnSettings()
        self.sigma0 = null_covariance(spec)
        self._values: dict[frozenset, float] = {}

    def value(self, members) -> float:
        key = frozenset(int(r) for r in members)
        if key not in self._values:
            sub = self.sigma0.submatrix(sorted(key))
            self._values[key] = equicoordinate_upper(sub, self.alpha, self.settings)
        return self._values[key]

    def all_intersections(self):
        R = self.spec.n_composites
        for mask in range(1, 1 << R):
            yield frozenset(r for r in range(R) if mask >> r & 1)


def critical_values(spec: DesignSpec, settings: MvnSettings | None = None,
                    alpha: float | None = None) -> CriticalValues:
    return CriticalValues(spec, settings, alpha)


def closed_test(z, spec: DesignSpec, settings: MvnSettings | None = None,
                crit: CriticalValues | None = None,
                clamped=(), alpha: float | None = None) -> ClosedTestReport:
    """Closed testing over all intersections of composite hypotheses.

    An intersection is rejected when its largest member statistic meets the
    common critical value for that intersection's restricted null law; a
    composite's elementary hypothesis falls only if every intersection
    containing it falls. All 2^R - 1 intersections are reported for audit;
    beyond R = 8 implied rejections are pruned (decisions are unchanged,
    the implied intersections inherit their conclusion).
    """
    z = np.asarray(z, dtype=float)
    R = spec.n_composites
    if z.shape != (R,):
        raise InferenceError(f"need one statistic per composite ({R})")
    crit = crit or CriticalValues(spec, settings, alpha)

    prune = R > 8
    decided: dict[frozenset, bool] = {}
    results = []
    # Equicoordinate thresholds grow with set inclusion, so the full-set
    # value bounds every intersection's threshold from above: a statistic
    # clearing it clears them all. With pruning on, such intersections are
    # recorded as rejected at the bound without solving for their own value.
    full_value = crit.value(range(R))
    for members in sorted(crit.all_intersections(), key=len):
        key = frozenset(members)
        idx = sorted(key)
        max_z = float(z[idx].max())
        if prune and max_z >= full_value:
            c = full_value
            rejected = True
        else:
            c = crit.value(key)
            rejected = max_z >= c
        decided[key] = rejected
        results.append(IntersectionResult(tuple(idx), float(c), max_z, rejected))

    elementary = tuple(
        all(rej for key, rej in decided.items() if r in key) for r in range(R))
    return ClosedTestReport(
        statistics=tuple(float(v) for v in z),
        alpha=crit.alpha,
        intersections=tuple(results),
        elementary_rejected=elementary,
        clamped=tuple(clamped),
    )


def analyze_dataset(data: Dataset, spec: DesignSpec,
                    settings: MvnSettings | None = None,
                    crit: CriticalValues | None = None):
    """Fit every subset, combine, and run the closed test.

    Returns (report, fits).
    """
    if data.blinded:
        raise InferenceError("analysis requires arm labels; data is blinded")
    fits = []
    for j in range(spec.n_subsets):
        arm, y, x = data.for_subset(j)
        if y.size == 0:
            raise InferenceError(f"no subjects observed in subset {spec.labels[j]}")
        fits.append(fit_subset(arm, y, x, spec.n_covariates))
    p = [f.p_value for f in fits]
    zs, clamped = [], []
    for r, comp in enumerate(spec.composites):
        z_r, cl = combine(p, spec.weights, comp)
        zs.append(z_r)
        if cl:
            clamped.append(r)
    report = closed_test(np.array(zs), spec, settings, crit, tuple(clamped))
    return report, fits


# ---------------------------------------------------------------------------
# CSV interface: header `subset,arm,y,x1,...,xD`; arm values T/C, blank or
# absent in blinded files.

def load_dataset(source, spec: DesignSpec) -> Dataset:
    """Read subject records from a CSV path or file-like object."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, "r", encoding="utf-8", newline="") as fh:
            text = fh.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise InferenceError("empty dataset file")
    header = [h.strip() for h in header]
    if "subset" not in header or "y" not in header:
        raise InferenceError("dataset header must include subset and y columns")
    i_subset = header.index("subset")
    i_arm = header.index("arm") if "arm" in header else None
    i_y = header.index("y")
    x_cols = [i for i, h in enumerate(header) if h.startswith("x")]
    if len(x_cols) != spec.n_covariates:
        raise InferenceError(
            f"design expects {spec.n_covariates} covariates, file has {len(x_cols)}")
    by_label = {lab: j for j, lab in enumerate(spec.labels)}

    subsets, arms, ys, xs = [], [], [], []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            lab = row[i_subset].strip()
            subsets.append(by_label[lab])
        except KeyError:
            raise InferenceError(f"line {line_no}: unknown subset {row[i_subset]!r}")
        if i_arm is None:
            arms.append(-1)
        else:
            a = row[i_arm].strip().upper()
            if a == "":
                arms.append(-1)
            elif a in ("T", "C"):
                arms.append(1 if a == "T" else 0)
            else:
                raise InferenceError(f"line {line_no}: arm must be T or C, got {a!r}")
        try:
            ys.append(float(row[i_y]))
            xs.append([float(row[i]) for i in x_cols])
        except (ValueError, IndexError) as e:
            raise InferenceError(f"line {line_no}: {e}")
    if not ys:
        raise InferenceError("dataset has no subject rows")
    return Dataset(
        subset=np.array(subsets, dtype=int),
        arm=np.array(arms, dtype=int),
        y=np.array(ys, dtype=float),
        x=np.array(xs, dtype=float).reshape(len(ys), len(x_cols)),
    )
