"""Population structure for composite-population trials.

A trial population is split into disjoint subsets with known prevalences.
Composite populations are unions of subsets, named by index sets, and each
carries a pre-fixed positive weight per member subset. The design also
records the allocation ratio, covariate count, significance level and
target power.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DesignError",
    "DesignSpec",
    "SubsetAssumptions",
    "validate",
    "overlap",
    "subset_sizes",
    "load_design",
    "load_assumptions",
]

MAX_COMPOSITES = 12  # closed testing enumerates 2^R - 1 intersections


class DesignError(ValueError):
    """One or more design invariants are violated."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class DesignSpec:
    """Validated trial design.

    prevalences: per-subset population fractions, summing to one.
    composites: tuple of index sets (0-based frozensets over subsets).
    weights: raw per-subset weights; combination statistics normalize them
        per composite, so no global scaling is imposed.
    kappa: treatment:control allocation ratio.
    """

    prevalences: tuple
    composites: tuple
    weights: tuple
    kappa: float = 1.0
    n_covariates: int = 0
    alpha: float = 0.025
    target_power: float = 0.9
    labels: tuple = None

    def __post_init__(self):
        if self.weights is None:
            object.__setattr__(self, "weights", tuple(self.prevalences))
        if self.labels is None:
            object.__setattr__(
                self, "labels",
                tuple(f"S{j + 1}" for j in range(len(self.prevalences))))
        object.__setattr__(self, "prevalences", tuple(float(t) for t in self.prevalences))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(
            self, "composites",
            tuple(frozenset(int(i) for i in c) for c in self.composites))
        validate(self)

    @property
    def n_subsets(self) -> int:
        return len(self.prevalences)

    @property
    def n_composites(self) -> int:
        return len(self.composites)

    def composite_label(self, r: int) -> str:
        members = sorted(self.composites[r])
        return "+".join(self.labels[j] for j in members)


def validate(spec: DesignSpec) -> DesignSpec:
    """Check every invariant, naming each violation individually."""
    errs = []
    J = len(spec.prevalences)
    if J == 0:
        raise DesignError("design needs at least one subset")
    if any(t <= 0 for t in spec.prevalences):
        errs.append("all prevalences must be positive")
    if abs(sum(spec.prevalences) - 1.0) > 1e-9:
        errs.append(f"prevalences must sum to 1, got {sum(spec.prevalences)!r}")
    if len(spec.weights) != J:
        errs.append("one weight per subset required")
    elif any(w <= 0 for w in spec.weights):
        errs.append("all weights must be positive")
    if len(spec.composites) == 0:
        errs.append("at least one composite population required")
    if len(spec.composites) > MAX_COMPOSITES:
        errs.append(f"at most {MAX_COMPOSITES} composites supported")
    seen = set()
    for r, comp in enumerate(spec.composites):
        if not comp:
            errs.append(f"composite {r + 1} is empty")
        elif not comp <= set(range(J)):
            errs.append(f"composite {r + 1} references unknown subsets")
        if comp in seen:
            errs.append(f"composite {r + 1} duplicates an earlier composite")
        seen.add(comp)
    if not 0.0 < spec.kappa:
        errs.append("allocation ratio kappa must be positive")
    if spec.n_covariates < 0:
        errs.append("covariate count must be non-negative")
    if not 0.0 < spec.alpha < 0.5:
        errs.append("alpha must lie in (0, 0.5)")
    if not 0.5 <= spec.target_power < 1.0:
        errs.append("target power must lie in [0.5, 1)")
    if spec.labels is not None and len(set(spec.labels)) != J:
        errs.append("subset labels must be unique")
    if errs:
        raise DesignError(errs)
    return spec


def overlap(spec: DesignSpec, r: int, r2: int) -> frozenset:
    """Shared subset indices of composites r and r2."""
    R = spec.n_composites
    if not (0 <= r < R and 0 <= r2 < R):
        raise DesignError(f"composite index out of range (R={R})")
    return spec.composites[r] & spec.composites[r2]


def _largest_remainder(targets, total: int):
    """Integer apportionment meeting `total` exactly.

    Ties in the fractional remainders break deterministically toward the
    lower index.
    """
    targets = np.asarray(targets, dtype=float)
    base = np.floor(targets).astype(int)
    short = total - int(base.sum())
    if short > 0:
        remainders = targets - np.floor(targets)
        # stable sort: equal remainders resolved by position
        order = np.argsort(-remainders, kind="stable")
        base[order[:short]] += 1
    return base


def subset_sizes(spec: DesignSpec, total_n: int):
    """Per-subset, per-arm integer counts for a trial of total_n subjects.

    Two-stage largest-remainder rounding: the arm split meets kappa, then
    each arm is apportioned over subsets by prevalence, so arm totals and
    the grand total are met exactly.

    Returns (treated, control) as integer arrays of length n_subsets.
    """
    if total_n < 1:
        raise DesignError("total_n must be at least 1")
    tau = np.asarray(spec.prevalences)
    frac_t = spec.kappa / (1.0 + spec.kappa)
    arm_totals = _largest_remainder([total_n * frac_t, total_n * (1 - frac_t)],
                                    total_n)
    treated = _largest_remainder(arm_totals[0] * tau, int(arm_totals[0]))
    control = _largest_remainder(arm_totals[1] * tau, int(arm_totals[1]))
    if np.any(treated + control < 2) or np.any(treated < 1) or np.any(control < 1):
        raise DesignError(
            f"total_n={total_n} leaves some subset without one subject per arm")
    return treated, control


@dataclass(frozen=True)
class SubsetAssumptions:
    """Planning values per subset: effect, outcome variance and the squared
    multiple correlation between outcome and covariates."""

    effects: tuple
    outcome_variances: tuple
    rho_sq: tuple
    covariate_variances: tuple = None  # per-subset scalar, defaults to 1

    def __post_init__(self):
        object.__setattr__(self, "effects", tuple(float(b) for b in self.effects))
        object.__setattr__(self, "outcome_variances",
                           tuple(float(v) for v in self.outcome_variances))
        object.__setattr__(self, "rho_sq", tuple(float(r) for r in self.rho_sq))
        if self.covariate_variances is None:
            object.__setattr__(self, "covariate_variances",
                               tuple(1.0 for _ in self.effects))
        else:
            object.__setattr__(self, "covariate_variances",
                               tuple(float(v) for v in self.covariate_variances))
        n = len(self.effects)
        if not (len(self.outcome_variances) == len(self.rho_sq)
                == len(self.covariate_variances) == n):
            raise DesignError("assumption lists must have equal lengths")
        if any(v <= 0 for v in self.outcome_variances):
            raise DesignError("outcome variances must be positive")
        if any(v <= 0 for v in self.covariate_variances):
            raise DesignError("covariate variances must be positive")
        if any(not 0.0 <= r < 1.0 for r in self.rho_sq):
            raise DesignError("squared multiple correlations must lie in [0, 1)")

    @property
    def n_subsets(self) -> int:
        return len(self.effects)


def _resolve_labels(labels, J):
    return list(labels) if labels else [f"S{j + 1}" for j in range(J)]


def load_design(source) -> DesignSpec:
    """Build a DesignSpec from a JSON document (path, str, or dict).

    Schema: subsets (list of {label, prevalence, weight?}), composites
    (list of lists of subset labels), kappa, n_covariates, alpha,
    target_power.
    """
    doc = _load_json(source)
    try:
        subsets = doc["subsets"]
        labels = [s["label"] for s in subsets]
        prevalences = [s["prevalence"] for s in subsets]
        weights = [s.get("weight", s["prevalence"]) for s in subsets]
        by_label = {lab: j for j, lab in enumerate(labels)}
        composites = []
        for comp in doc["composites"]:
            try:
                composites.append([by_label[lab] for lab in comp])
            except KeyError as e:
                raise DesignError(f"composite references unknown subset {e}")
        return DesignSpec(
            prevalences=tuple(prevalences),
            composites=tuple(composites),
            weights=tuple(weights),
            kappa=float(doc.get("kappa", 1.0)),
            n_covariates=int(doc.get("n_covariates", 0)),
            alpha=float(doc.get("alpha", 0.025)),
            target_power=float(doc.get("target_power", 0.9)),
            labels=tuple(labels),
        )
    except (KeyError, TypeError) as e:
        raise DesignError(f"malformed design document: {e}")


def load_assumptions(source, spec: DesignSpec) -> SubsetAssumptions:
    """Per-subset planning assumptions from JSON, aligned to spec labels.

    Schema: assumptions (list of {label, effect, outcome_variance, rho_sq,
    covariate_variance?}).
    """
    doc = _load_json(source)
    try:
        rows = {row["label"]: row for row in doc["assumptions"]}
    except (KeyError, TypeError) as e:
        raise DesignError(f"malformed assumptions document: {e}")
    missing = [lab for lab in spec.labels if lab not in rows]
    if missing:
        raise DesignError(f"assumptions missing for subsets: {missing}")
    ordered = [rows[lab] for lab in spec.labels]
    try:
        return SubsetAssumptions(
            effects=tuple(r["effect"] for r in ordered),
            outcome_variances=tuple(r["outcome_variance"] for r in ordered),
            rho_sq=tuple(r["rho_sq"] for r in ordered),
            covariate_variances=tuple(r.get("covariate_variance", 1.0)
                                      for r in ordered),
        )
    except (KeyError, TypeError) as e:
        raise DesignError(f"malformed assumptions document: {e}")


def _load_json(source):
    if isinstance(source, dict):
        return source
    if isinstance(source, Path) or (
            isinstance(source, str) and "\n" not in source and source.endswith(".json")):
        with open(source, "r", encoding="utf-8") as fh:
            return json.load(fh)
    return json.loads(source)
