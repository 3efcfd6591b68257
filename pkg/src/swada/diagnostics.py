"""Collapsibility arithmetic: the mismatch functional, influence and bias terms.

The mismatch between the difference-of-averages interaction and the pooled
within-study difference is a linear functional of the stacked subgroup
estimates.  Its exact first two moments follow from the weight vectors alone,
so no testing is involved: the functional, its variance, per-study
contributions and leave-one-out influence are computed directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .heterogeneity import iv_weights
from .model import MetaDataset
from .weights import WeightVector, _is_random_effects, _subgroup_tau2, compute_weights, contrast_tau2

__all__ = [
    "MismatchReport",
    "InfluenceReport",
    "build_weight_pair",
    "mismatch",
    "mismatch_for",
    "loo_influence",
    "aggregation_bias_expectation",
    "subgroup_mean_bias",
]


@dataclass(frozen=True)
class MismatchReport:
    """The estimated difference between across- and within-study interactions.

    ``d_matrix`` is the 2k coefficient row over the stacked estimates
    (subgroup-A block first, then subgroup-B), ``delta_hat`` its value and
    ``var_delta`` the exact variance under the recorded variance model.
    ``per_study_contribution`` splits delta_hat by study and sums to it.
    """

    delta_hat: float
    var_delta: float
    d_matrix: np.ndarray
    per_study_contribution: np.ndarray
    variance_model: str


@dataclass(frozen=True)
class InfluenceReport:
    """Leave-one-out influence of each study on the mismatch functional."""

    study_ids: tuple[str, ...]
    variance_ratio: np.ndarray
    delta_shift: np.ndarray


def _as_array(w) -> np.ndarray:
    return w.array if isinstance(w, WeightVector) else np.asarray(w, dtype=float)


def mismatch(
    data: MetaDataset,
    da_weights: tuple,
    ad_weights,
    variance_model: str = "ce",
    tau_method: str = "reml",
) -> MismatchReport:
    """Mismatch functional for explicit weight vectors.

    ``da_weights`` is the pair (subgroup-A weights, subgroup-B weights) of the
    difference-of-averages analysis and ``ad_weights`` the contrast weights of
    the average-difference analysis.  The coefficient row is
    [w_a - w_ad, -(w_b - w_ad)] over the stacked (A, B) estimates, evaluated
    in the package's A-minus-B convention.  The variance uses the sampling
    variances alone under ``variance_model='ce'`` and adds each subgroup's
    REML heterogeneity under ``'re'``.
    """
    w_a = _as_array(da_weights[0])
    w_b = _as_array(da_weights[1])
    w_ad = _as_array(ad_weights)
    k = len(data)
    if not (len(w_a) == len(w_b) == len(w_ad) == k):
        raise ValueError("weight vectors must align with the dataset")

    d_row = np.concatenate([w_a - w_ad, -(w_b - w_ad)])
    y = np.concatenate([data.y_a, data.y_b])
    var = np.concatenate([data.var_a, data.var_b])
    if variance_model == "re":
        var = var + np.concatenate([
            np.full(k, _subgroup_tau2(data.y_a, data.var_a, tau_method)),
            np.full(k, _subgroup_tau2(data.y_b, data.var_b, tau_method)),
        ])
    elif variance_model != "ce":
        raise ValueError(f"unknown variance model: {variance_model!r}")

    active = d_row != 0.0
    if np.any(active & ~np.isfinite(var)):
        raise ValueError("nonzero mismatch coefficient on an absent estimate")
    delta_hat = float(np.dot(d_row[active], y[active]))
    var_delta = float(np.dot(d_row[active] ** 2, var[active]))
    contrib = d_row * y  # absent placeholders are 0.0 with zero coefficient
    per_study = contrib[:k] + contrib[k:]
    return MismatchReport(
        delta_hat=delta_hat,
        var_delta=var_delta,
        d_matrix=d_row,
        per_study_contribution=per_study,
        variance_model=variance_model,
    )


def build_weight_pair(
    data: MetaDataset,
    da_scheme: str = "iv",
    ad_scheme: str = "iv",
    model: str = "ce",
    tau_method: str = "reml",
):
    """Weight vectors for a mismatch comparison, from scheme selectors.

    ``'iv'`` selects the estimators' own inverse-variance weights (per
    subgroup column for the DA side, per contrast for the AD side; with
    heterogeneity under ``model='re'``).  Any SWADA scheme name selects that
    common weight vector, renormalized over each column's support.
    """
    re = _is_random_effects(model)

    def column_weights(y, v):
        tau2 = _subgroup_tau2(y, v, tau_method) if re else 0.0
        return iv_weights(v, tau2)

    if da_scheme == "iv":
        w_a = column_weights(data.y_a, data.var_a)
        w_b = column_weights(data.y_b, data.var_b)
    else:
        base = compute_weights(data, da_scheme, tau_method=tau_method).array
        w_a = _renormalize(base, data.mask_a)
        w_b = _renormalize(base, data.mask_b)
    if ad_scheme == "iv":
        tau2 = contrast_tau2(data, tau_method) if re else 0.0
        w_ad = iv_weights(data.var_g, tau2)
    else:
        base = compute_weights(data, ad_scheme, tau_method=tau_method).array
        w_ad = _renormalize(base, data.mask_two_arm)
    return (w_a, w_b), w_ad


def _renormalize(w: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = np.where(mask, w, 0.0)
    total = out.sum()
    if total <= 0:
        raise ValueError("scheme leaves no weight on the required support")
    return out / total


def mismatch_for(
    data: MetaDataset,
    da_scheme: str = "iv",
    ad_scheme: str = "iv",
    model: str = "ce",
    tau_method: str = "reml",
) -> MismatchReport:
    """Mismatch report for scheme selectors (see :func:`build_weight_pair`)."""
    da_pair, ad_w = build_weight_pair(data, da_scheme, ad_scheme, model, tau_method)
    return mismatch(data, da_pair, ad_w, variance_model="re" if _is_random_effects(model) else "ce",
                    tau_method=tau_method)


def loo_influence(
    data: MetaDataset,
    da_scheme: str = "iv",
    ad_scheme: str = "iv",
    model: str = "ce",
    tau_method: str = "reml",
) -> InfluenceReport:
    """Leave-one-out influence on the mismatch: weights are recomputed on each
    reduced dataset, so the ratio reflects the analysis actually run without
    that study."""
    if len(data) < 3:
        raise ValueError("leave-one-out influence needs at least 3 studies")
    full = mismatch_for(data, da_scheme, ad_scheme, model, tau_method)
    ratios = []
    shifts = []
    for s in data.studies:
        reduced = data.drop(s.study_id)
        rep = mismatch_for(reduced, da_scheme, ad_scheme, model, tau_method)
        ratios.append(rep.var_delta / full.var_delta if full.var_delta > 0 else math.nan)
        shifts.append(rep.delta_hat - full.delta_hat)
    return InfluenceReport(
        study_ids=tuple(data.study_ids),
        variance_ratio=np.array(ratios),
        delta_shift=np.array(shifts),
    )


def aggregation_bias_expectation(prevalences, w_a, w_b, delta: float) -> float:
    """Expected difference-of-averages bias delta * sum p_b (w_a - w_b).

    This is the exact expectation of the across-study interaction estimator
    minus the within-study interaction under a linear prevalence effect of
    slope ``delta`` on the subgroup levels, in the A-minus-B convention.
    """
    p = np.asarray(prevalences, dtype=float)
    wa = _as_array(w_a)
    wb = _as_array(w_b)
    if not (len(p) == len(wa) == len(wb)):
        raise ValueError("inputs must align")
    return float(delta * np.dot(p, wa - wb))


def subgroup_mean_bias(gamma_w: float) -> float:
    """Bias of the midpoint of collapsible subgroup means: half the interaction."""
    return 0.5 * gamma_w
