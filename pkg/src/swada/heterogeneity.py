"""Between-study heterogeneity estimation and univariate inverse-variance pooling.

These are the scalar building blocks shared by every estimator family:
a DerSimonian-Laird moment estimator of tau^2, a REML estimator found by
bounded one-dimensional search, and a weighted-average pooler that accepts
either the default inverse-variance weights or an externally supplied weight
vector.  Entries with infinite variance are legal everywhere and carry zero
weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .model import PooledEffect

__all__ = [
    "UnivariateSample",
    "TauEstimate",
    "tau_dl",
    "tau_reml",
    "estimate_tau",
    "pool_univariate",
]


@dataclass(frozen=True)
class UnivariateSample:
    """Effects with sampling variances; infinite variances mark absent entries."""

    effects: tuple[float, ...]
    variances: tuple[float, ...]

    def __init__(self, effects: Sequence[float], variances: Sequence[float]):
        effects = tuple(float(e) for e in effects)
        variances = tuple(float(v) for v in variances)
        if len(effects) != len(variances):
            raise ValueError("effects and variances must have equal length")
        if any(v <= 0 for v in variances):
            raise ValueError("variances must be positive (inf allowed)")
        if not any(math.isfinite(v) for v in variances):
            raise ValueError("sample needs at least one finite-variance entry")
        object.__setattr__(self, "effects", effects)
        object.__setattr__(self, "variances", variances)

    def __len__(self) -> int:
        return len(self.effects)

    def finite(self) -> tuple[np.ndarray, np.ndarray]:
        """(effects, variances) restricted to finite-variance entries."""
        y = np.asarray(self.effects)
        v = np.asarray(self.variances)
        m = np.isfinite(v)
        return y[m], v[m]


@dataclass(frozen=True)
class TauEstimate:
    tau2: float
    method: str

    def __post_init__(self):
        if self.tau2 < 0:
            raise ValueError("tau2 must be nonnegative")


def _require_two(sample: UnivariateSample) -> tuple[np.ndarray, np.ndarray]:
    y, v = sample.finite()
    if len(y) < 2:
        raise ValueError("insufficient studies: tau estimation needs >=2 finite entries")
    return y, v


def tau_dl(sample: UnivariateSample) -> TauEstimate:
    """DerSimonian-Laird moment estimator of tau^2, truncated at zero.

    tau^2 = max(0, (Q - (m - 1)) / c) with Q the fixed-effect weighted sum of
    squares, m the number of finite-variance entries, and
    c = sum(w) - sum(w^2)/sum(w) for w = 1/variance.
    """
    y, v = _require_two(sample)
    w = 1.0 / v
    sw = w.sum()
    mu = np.dot(w, y) / sw
    q = np.dot(w, (y - mu) ** 2)
    c = sw - np.dot(w, w) / sw
    m = len(y)
    if c <= 0:
        return TauEstimate(0.0, "dersimonian_laird")
    return TauEstimate(max(0.0, (q - (m - 1)) / c), "dersimonian_laird")


def _neg_restricted_loglik(tau2: float, y: np.ndarray, v: np.ndarray) -> float:
    w = 1.0 / (v + tau2)
    sw = w.sum()
    mu = np.dot(w, y) / sw
    q = np.dot(w, (y - mu) ** 2)
    return 0.5 * (np.sum(np.log(v + tau2)) + math.log(sw) + q)


def _neg_restricted_score(tau2: float, y: np.ndarray, v: np.ndarray) -> float:
    """Derivative of the negative restricted log-likelihood in tau^2."""
    w = 1.0 / (v + tau2)
    sw = w.sum()
    mu = np.dot(w, y) / sw
    r2 = (y - mu) ** 2
    return 0.5 * (sw - np.dot(w, w) / sw - np.dot(w * w, r2))


def tau_reml(sample: UnivariateSample) -> TauEstimate:
    """REML estimator of tau^2 over [0, 10 * sample variance of the effects].

    The restricted-likelihood score has an analytic form, so an interior
    maximizer is located by root bracketing to well below the 1e-8
    convergence tolerance; truncation at zero is exact when the score is
    nonnegative at the origin.
    """
    y, v = _require_two(sample)
    upper = 10.0 * float(np.var(y, ddof=1))
    if upper <= 0:
        return TauEstimate(0.0, "reml")
    if _neg_restricted_score(0.0, y, v) >= 0.0:
        return TauEstimate(0.0, "reml")
    if _neg_restricted_score(upper, y, v) <= 0.0:
        tau2 = upper
    else:
        tau2 = float(
            brentq(_neg_restricted_score, 0.0, upper, args=(y, v), xtol=1e-12, maxiter=500)
        )
    # a sign change can bracket a local extremum; keep zero when it is as good
    if _neg_restricted_loglik(0.0, y, v) <= _neg_restricted_loglik(tau2, y, v):
        tau2 = 0.0
    return TauEstimate(max(0.0, tau2), "reml")


def estimate_tau(sample: UnivariateSample, method: str = "reml") -> TauEstimate:
    """Dispatch on the tau estimator name: 'reml', 'dl' or 'zero'."""
    if method in ("reml", "restricted"):
        return tau_reml(sample)
    if method in ("dl", "dersimonian_laird"):
        return tau_dl(sample)
    if method in ("zero", "fixed_zero", "none"):
        return TauEstimate(0.0, "fixed_zero")
    raise ValueError(f"unknown tau estimator: {method!r}")


def iv_weights(variances: np.ndarray, tau2: float = 0.0) -> np.ndarray:
    """Normalized inverse-variance weights; infinite variances get exact zeros.

    The normalizing sum runs over the finite entries only, so the weights of
    the present studies are bit-identical whether or not absent entries are
    interleaved in the input.
    """
    v = np.asarray(variances, dtype=float)
    raw = np.zeros_like(v)
    finite = np.isfinite(v)
    raw[finite] = 1.0 / (v[finite] + tau2)
    total = raw[finite].sum()
    if total <= 0:
        raise ValueError("no usable entries for inverse-variance weighting")
    return raw / total


def weighted_pool(y: np.ndarray, v: np.ndarray, w: np.ndarray, tau2: float) -> tuple[float, float]:
    """Point and standard error of sum(w*y) under marginal variances v + tau2.

    All SWADA and univariate pools funnel through this helper so that
    identical inputs give bit-identical outputs.
    """
    point = float(np.dot(w, y))
    se = float(np.sqrt(np.dot(w * w, v + tau2)))
    return point, se


def pool_univariate(
    sample: UnivariateSample,
    tau2: float = 0.0,
    weights: Sequence[float] | np.ndarray | None = None,
) -> tuple[PooledEffect, np.ndarray]:
    """Weighted-average pooling of a univariate sample.

    With ``weights=None`` the usual inverse-variance weights
    w_j proportional to 1/(v_j + tau2) are used; otherwise the supplied
    weights (nonnegative, summing to one, zero on infinite-variance entries)
    define the estimator.  Returns the pooled effect and the weight vector
    actually used, aligned to the sample.
    """
    if tau2 < 0:
        raise ValueError("tau2 must be nonnegative")
    y = np.asarray(sample.effects, dtype=float)
    v = np.asarray(sample.variances, dtype=float)
    finite = np.isfinite(v)
    if weights is None:
        w = iv_weights(v, tau2)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != v.shape:
            raise ValueError("weights must align with the sample")
        if np.any(w < -1e-12):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")
        if np.any(w[~finite] > 0):
            raise ValueError("weight on absent estimate")
    point, se = weighted_pool(y[finite], v[finite], w[finite], tau2)
    return PooledEffect(point=point, std_err=se), w
