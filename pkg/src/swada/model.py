"""Core domain types for subgroup meta-analysis on the log odds-ratio scale.

A study contributes up to two subgroup estimates (arms "a" and "b").  A missing
subgroup is represented by an explicit absent state (zero participants,
infinite standard error) rather than by sentinel magnitudes, so that
inverse-variance arithmetic naturally assigns it zero weight.  All types are
immutable value objects and safe to share between threads.

The interaction ("gamma") convention is fixed throughout the package as

    gamma = effect(arm a) - effect(arm b)

i.e. the log ratio of odds ratios of subgroup A versus subgroup B.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

__all__ = [
    "Z975",
    "SubgroupEstimate",
    "StudyRecord",
    "ContrastEstimate",
    "MetaDataset",
    "PooledEffect",
    "AnalysisResult",
    "absent_estimate",
    "contrast",
    "se_from_uisd",
    "swap_arms",
    "validate_dataset",
]

# two-sided 95% normal quantile used for every Wald interval
Z975 = float(norm.ppf(0.975))


@dataclass(frozen=True)
class SubgroupEstimate:
    """One subgroup's treatment effect estimate within a single study.

    Parameters
    ----------
    effect : float
        Log odds ratio.  Placeholder 0.0 when the subgroup is absent; the
        placeholder is never read by any estimator.
    std_err : float
        Standard error; ``math.inf`` if and only if the subgroup is absent.
    n : int
        Number of participants in the subgroup (0 when absent).
    """

    effect: float
    std_err: float
    n: int

    def __post_init__(self):
        if self.n < 0:
            raise ValueError(f"subgroup size must be nonnegative, got {self.n}")
        if self.n == 0:
            if math.isfinite(self.std_err):
                raise ValueError("absent subgroup (n=0) must carry infinite std_err")
        else:
            if not (math.isfinite(self.std_err) and self.std_err > 0):
                raise ValueError("present subgroup needs a finite positive std_err")
            if not math.isfinite(self.effect):
                raise ValueError("present subgroup needs a finite effect")

    @property
    def present(self) -> bool:
        return math.isfinite(self.std_err)

    @property
    def variance(self) -> float:
        return self.std_err**2


def absent_estimate() -> SubgroupEstimate:
    """The canonical absent subgroup: zero participants, infinite standard error."""
    return SubgroupEstimate(effect=0.0, std_err=math.inf, n=0)


@dataclass(frozen=True)
class StudyRecord:
    """One trial: two subgroup estimates (one possibly absent) plus sizes.

    ``prevalence_b`` is the proportion of participants in subgroup B and must
    equal ``arm_b.n / n_total`` (checked to 1e-12).
    """

    study_id: str
    arm_a: SubgroupEstimate
    arm_b: SubgroupEstimate
    n_total: int
    prevalence_b: float

    def __post_init__(self):
        if not self.study_id:
            raise ValueError("study_id must be a non-empty string")
        if self.n_total <= 0:
            raise ValueError(f"{self.study_id}: n_total must be positive")
        if self.arm_a.n + self.arm_b.n != self.n_total:
            raise ValueError(
                f"{self.study_id}: n_total != arm_a.n + arm_b.n "
                f"({self.n_total} != {self.arm_a.n} + {self.arm_b.n})"
            )
        if abs(self.prevalence_b - self.arm_b.n / self.n_total) > 1e-12:
            raise ValueError(f"{self.study_id}: prevalence_b inconsistent with arm sizes")
        if not (self.arm_a.present or self.arm_b.present):
            raise ValueError(f"{self.study_id}: at least one arm must be present")

    @property
    def prevalence_a(self) -> float:
        return 1.0 - self.prevalence_b

    @property
    def two_arm(self) -> bool:
        return self.arm_a.present and self.arm_b.present


@dataclass(frozen=True)
class ContrastEstimate:
    """Within-study interaction g = effect(a) - effect(b) with its standard error."""

    g: float
    std_err: float

    @property
    def present(self) -> bool:
        return math.isfinite(self.std_err)

    @property
    def variance(self) -> float:
        return self.std_err**2


def contrast(study: StudyRecord) -> ContrastEstimate:
    """Within-study subgroup contrast of a single trial.

    Returns g = arm_a.effect - arm_b.effect with standard error
    sqrt(se_a^2 + se_b^2).  If either arm is absent the contrast carries an
    infinite standard error and the conventional placeholder g = 0.
    """
    if not study.two_arm:
        return ContrastEstimate(g=0.0, std_err=math.inf)
    g = study.arm_a.effect - study.arm_b.effect
    se = math.hypot(study.arm_a.std_err, study.arm_b.std_err)
    return ContrastEstimate(g=g, std_err=se)


def se_from_uisd(uisd: float, n_total: int, prevalence: float) -> float:
    """Subgroup standard error implied by a unit information standard deviation.

    se = uisd / sqrt(prevalence * n_total); a zero prevalence yields an
    infinite standard error (absent subgroup).
    """
    if uisd <= 0:
        raise ValueError("uisd must be positive")
    if n_total <= 0:
        raise ValueError("n_total must be positive")
    if not 0.0 <= prevalence <= 1.0:
        raise ValueError("prevalence must lie in [0, 1]")
    if prevalence == 0.0:
        return math.inf
    return uisd / math.sqrt(prevalence * n_total)


def swap_arms(study: StudyRecord) -> StudyRecord:
    """The same study with subgroups A and B interchanged."""
    return StudyRecord(
        study_id=study.study_id,
        arm_a=study.arm_b,
        arm_b=study.arm_a,
        n_total=study.n_total,
        prevalence_b=study.arm_a.n / study.n_total,
    )


@dataclass(frozen=True)
class MetaDataset:
    """An ordered collection of studies on a common log-OR scale."""

    studies: tuple[StudyRecord, ...]
    scale: str = "log_or"
    label_a: str = "A"
    label_b: str = "B"

    def __init__(self, studies: Iterable[StudyRecord], scale: str = "log_or",
                 label_a: str = "A", label_b: str = "B"):
        object.__setattr__(self, "studies", tuple(studies))
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "label_a", label_a)
        object.__setattr__(self, "label_b", label_b)

    def __len__(self) -> int:
        return len(self.studies)

    @property
    def study_ids(self) -> list[str]:
        return [s.study_id for s in self.studies]

    # --- column views (placeholder 0.0 / inf variance where an arm is absent) ---

    @property
    def y_a(self) -> np.ndarray:
        return np.array([s.arm_a.effect for s in self.studies])

    @property
    def y_b(self) -> np.ndarray:
        return np.array([s.arm_b.effect for s in self.studies])

    @property
    def var_a(self) -> np.ndarray:
        return np.array([s.arm_a.variance for s in self.studies])

    @property
    def var_b(self) -> np.ndarray:
        return np.array([s.arm_b.variance for s in self.studies])

    @property
    def mask_a(self) -> np.ndarray:
        return np.array([s.arm_a.present for s in self.studies])

    @property
    def mask_b(self) -> np.ndarray:
        return np.array([s.arm_b.present for s in self.studies])

    @property
    def mask_two_arm(self) -> np.ndarray:
        return np.array([s.two_arm for s in self.studies])

    @property
    def n_total(self) -> np.ndarray:
        return np.array([s.n_total for s in self.studies])

    @property
    def prevalence_b(self) -> np.ndarray:
        return np.array([s.prevalence_b for s in self.studies])

    @property
    def contrasts(self) -> list[ContrastEstimate]:
        return [contrast(s) for s in self.studies]

    @property
    def g(self) -> np.ndarray:
        return np.array([c.g for c in self.contrasts])

    @property
    def var_g(self) -> np.ndarray:
        return np.array([c.variance for c in self.contrasts])

    def subset(self, keep: Sequence[bool] | np.ndarray) -> "MetaDataset":
        """Dataset restricted to the studies flagged in ``keep`` (order kept)."""
        kept = [s for s, k in zip(self.studies, keep) if k]
        return MetaDataset(kept, scale=self.scale, label_a=self.label_a, label_b=self.label_b)

    def two_arm_subset(self) -> "MetaDataset":
        """Dataset restricted to studies contributing both subgroups."""
        return self.subset(self.mask_two_arm)

    def drop(self, study_id: str) -> "MetaDataset":
        return self.subset([s.study_id != study_id for s in self.studies])


def validate_dataset(data: MetaDataset) -> list[str]:
    """Check dataset-level invariants; returns a list of violation messages.

    Study-level invariants are enforced at construction time, so this reports
    only cross-study rules: unique ids, at least two studies, and at least one
    study supplying both subgroups (without which no interaction estimator can
    run).  An empty list means the dataset is valid.
    """
    violations: list[str] = []
    seen: set[str] = set()
    for s in data.studies:
        if s.study_id in seen:
            violations.append(f"duplicate study_id: {s.study_id}")
        seen.add(s.study_id)
    if len(data.studies) < 2:
        violations.append("dataset needs at least 2 studies")
    if not any(s.two_arm for s in data.studies):
        violations.append("dataset needs at least 1 study with both subgroups present")
    if data.scale != "log_or":
        violations.append(f"unsupported effect scale: {data.scale}")
    return violations


@dataclass(frozen=True)
class PooledEffect:
    """A pooled point estimate with Wald-normal 95% interval on the log scale."""

    point: float
    std_err: float
    ci_lower: float = field(default=math.nan)
    ci_upper: float = field(default=math.nan)

    def __post_init__(self):
        if math.isnan(self.ci_lower):
            object.__setattr__(self, "ci_lower", self.point - Z975 * self.std_err)
        if math.isnan(self.ci_upper):
            object.__setattr__(self, "ci_upper", self.point + Z975 * self.std_err)

    def exp(self) -> tuple[float, float, float]:
        """(ratio, ci_lower, ci_upper) on the odds-ratio scale."""
        return math.exp(self.point), math.exp(self.ci_lower), math.exp(self.ci_upper)


@dataclass(frozen=True)
class AnalysisResult:
    """Pooled subgroup effects and interaction for one estimation method.

    ``gamma`` follows the package-wide A-minus-B convention.  ``beta_a`` and
    ``beta_b`` may be ``None`` for interaction-only methods (plain contrast
    pooling).  ``tau_estimates`` maps named heterogeneity components to the
    tau^2 values actually used for interval widths.  ``weights_*`` record the
    per-study weights (aligned to the dataset) where the estimator is a
    weighted average; multivariate fits leave them ``None``.
    """

    method: str
    gamma: PooledEffect
    beta_a: PooledEffect | None = None
    beta_b: PooledEffect | None = None
    tau_estimates: dict[str, float] = field(default_factory=dict)
    weights_a: "object | None" = None
    weights_b: "object | None" = None
    weights_gamma: "object | None" = None
    collapsible: bool = False

    def ror(self) -> float:
        """Interaction as a ratio of odds ratios (subgroup A versus B)."""
        return math.exp(self.gamma.point)
