"""Common-weight (SWADA) schemes and the common-weight pooling engine.

A SWADA analysis applies one weight per study to the subgroup-A pool, the
subgroup-B pool and the contrast pool simultaneously, which forces the
difference of pooled subgroup effects to equal the pooled within-study
difference (collapsibility).  Six schemes are provided: equal, interaction
(contrast inverse-variance, optionally with heterogeneity), study size,
smaller subgroup, minimum of the three inverse-variance weights, and weights
minimizing the joint variance of the subgroup estimates.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .heterogeneity import UnivariateSample, estimate_tau, iv_weights, weighted_pool
from .model import AnalysisResult, MetaDataset, PooledEffect

__all__ = [
    "SCHEMES",
    "WeightVector",
    "compute_weights",
    "weights_min_total_variance",
    "pool_swada",
    "swada_analysis",
]

SCHEMES = (
    "equal",
    "interaction_re",
    "study_size",
    "smaller_subgroup",
    "min_iv",
    "min_total_variance",
)


@dataclass(frozen=True)
class WeightVector:
    """Per-study nonnegative weights summing to one, tagged with their scheme."""

    weights: tuple[float, ...]
    scheme: str
    tau2_used: float = 0.0

    def __init__(self, weights: Sequence[float], scheme: str, tau2_used: float = 0.0):
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        if tau2_used < 0:
            raise ValueError("tau2_used must be nonnegative")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))
        object.__setattr__(self, "scheme", scheme)
        object.__setattr__(self, "tau2_used", tau2_used)

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.weights)


def contrast_tau2(data: MetaDataset, tau_method: str = "reml") -> float:
    """Heterogeneity of the within-study contrasts (the AD tau-squared).

    Zero when fewer than two studies supply a contrast.
    """
    mask = data.mask_two_arm
    if mask.sum() < 2:
        return 0.0
    sample = UnivariateSample(data.g, data.var_g)
    return estimate_tau(sample, tau_method).tau2


def compute_weights(
    data: MetaDataset,
    scheme: str,
    tau2: float | None = None,
    tau_method: str = "reml",
) -> WeightVector:
    """Compute a SWADA weight vector for the given scheme.

    ``tau2`` defaults to the contrast REML tau^2 for the interaction scheme
    and to 0 for the minimum-IV scheme.  Schemes that need a within-study
    contrast (interaction_re, min_iv, min_total_variance) assign exact zero
    weight to single-subgroup studies; equal and study-size weights cover all
    studies by their definition.
    """
    k = len(data)
    if k == 0:
        raise ValueError("empty dataset")
    if scheme == "equal":
        w = np.full(k, 1.0 / k)
        return WeightVector(w, scheme)
    if scheme == "study_size":
        n = data.n_total.astype(float)
        return WeightVector(n / n.sum(), scheme)
    if scheme == "smaller_subgroup":
        smaller = np.array([min(s.arm_a.n, s.arm_b.n) for s in data.studies], dtype=float)
        if smaller.sum() <= 0:
            raise ValueError("smaller-subgroup weights need at least one two-arm study")
        return WeightVector(smaller / smaller.sum(), scheme)
    if scheme == "interaction_re":
        if not data.mask_two_arm.any():
            raise ValueError("interaction weights need at least one two-arm study")
        if tau2 is None:
            tau2 = contrast_tau2(data, tau_method)
        w = iv_weights(data.var_g, tau2)
        return WeightVector(w, scheme, tau2_used=tau2)
    if scheme == "min_iv":
        if not data.mask_two_arm.any():
            raise ValueError("minimum-IV weights need at least one two-arm study")
        if tau2 is None:
            tau2 = 0.0
        raw = np.zeros(k)
        for j, s in enumerate(data.studies):
            candidates = (
                s.arm_a.variance + tau2,
                s.arm_b.variance + tau2,
                s.arm_a.variance + s.arm_b.variance + tau2,
            )
            smallest = min(1.0 / c if math.isfinite(c) else 0.0 for c in candidates)
            raw[j] = smallest
        return WeightVector(raw / raw.sum(), scheme, tau2_used=tau2)
    if scheme == "min_total_variance":
        return weights_min_total_variance(data, tau2=tau2 or 0.0)
    raise ValueError(f"unknown weighting scheme: {scheme!r}")


def _mtv_objective_grad(z: np.ndarray, va: np.ndarray, vb: np.ndarray):
    """log-determinant objective and gradient in softmax coordinates."""
    z = z - z.max()
    e = np.exp(z)
    w = e / e.sum()
    qa = np.dot(w * w, va)
    qb = np.dot(w * w, vb)
    # log objective keeps the scale sane; same minimizer as qa*qb
    f = math.log(qa) + math.log(qb)
    df_dw = 2.0 * w * (va / qa + vb / qb)
    # softmax Jacobian: dw_i/dz_j = w_i (delta_ij - w_j)
    grad = w * (df_dw - np.dot(df_dw, w))
    return f, grad


def weights_min_total_variance(data: MetaDataset, tau2: float = 0.0) -> WeightVector:
    """Common weights minimizing the joint variance of both subgroup pools.

    Minimizes the determinant of the 2x2 covariance of (beta_a, beta_b) under
    common weights, i.e. (sum w^2 (s_a^2+tau2)) * (sum w^2 (s_b^2+tau2)), over
    the probability simplex with zero weight forced on single-subgroup
    studies.  Solved through a softmax reparameterization with 16
    deterministic multistarts; ties within 1e-9 of the best objective are
    broken toward the candidate placing most weight on the lowest-index study.
    """
    mask = data.mask_two_arm
    m = int(mask.sum())
    if m < 2:
        raise ValueError("minimum-total-variance weights need at least 2 two-arm studies")
    va = data.var_a[mask] + tau2
    vb = data.var_b[mask] + tau2

    candidates: list[tuple[float, np.ndarray]] = []
    for start in range(16):
        z0 = _mtv_start(data, start, m)
        res = minimize(
            _mtv_objective_grad,
            z0,
            args=(va, vb),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": 500, "gtol": 1e-9, "ftol": 1e-14},
        )
        f, grad = _mtv_objective_grad(res.x, va, vb)
        if np.max(np.abs(grad)) < 1e-7:
            z = res.x - res.x.max()
            e = np.exp(z)
            candidates.append((f, e / e.sum()))
    if not candidates:
        raise ValueError("minimum-total-variance optimization did not converge")
    best = min(f for f, _ in candidates)
    ties = [w for f, w in candidates if f <= best + 1e-9]
    # lowest-index lexicographic preference among numerically tied optima
    ties.sort(key=lambda w: tuple(-w))
    w_sub = ties[0]
    w = np.zeros(len(data))
    w[mask] = w_sub
    w /= w.sum()
    return WeightVector(w, "min_total_variance", tau2_used=tau2)


def _mtv_start(data: MetaDataset, start: int, m: int) -> np.ndarray:
    """Deterministic multistart points keyed by (dataset ids, start index)."""
    if start == 0:
        return np.zeros(m)
    key = ("|".join(data.study_ids) + f"#{start}").encode()
    seed = int.from_bytes(hashlib.sha256(key).digest()[:8], "big")
    rng = np.random.default_rng(seed)
    return rng.normal(scale=2.0, size=m)


def pool_swada(
    data: MetaDataset,
    weights: WeightVector,
    model: str = "random_effects",
    tau_method: str = "reml",
) -> AnalysisResult:
    """Pool subgroup effects and interaction under one common weight vector.

    Point estimates are the plain weighted sums of the subgroup columns and of
    the within-study contrasts, so beta_a - beta_b - gamma vanishes up to
    floating-point rounding.  Interval widths use the contrast heterogeneity
    for gamma and each subgroup column's own heterogeneity for the subgroup
    means (zero under a common-effect model).

    Raises if any positive weight falls on a study lacking one of the
    subgroups; pair such schemes with an explicit exclusion policy (see
    ``swada_analysis``).
    """
    w = weights.array
    if len(w) != len(data):
        raise ValueError("weight vector does not align with the dataset")
    mask = data.mask_two_arm
    if np.any(w[~mask] > 0):
        raise ValueError(
            "scheme weights incompatible with contrast pooling: positive weight "
            "on a single-subgroup study"
        )
    re = _is_random_effects(model)
    tau2_g = weights.tau2_used
    if re and weights.scheme != "interaction_re":
        tau2_g = contrast_tau2(data, tau_method)
    if not re:
        tau2_g = 0.0
    tau2_a = _subgroup_tau2(data.y_a, data.var_a, tau_method) if re else 0.0
    tau2_b = _subgroup_tau2(data.y_b, data.var_b, tau_method) if re else 0.0

    wm = w[mask]
    g_point, g_se = weighted_pool(data.g[mask], data.var_g[mask], wm, tau2_g)
    a_point, a_se = weighted_pool(data.y_a[mask], data.var_a[mask], wm, tau2_a)
    b_point, b_se = weighted_pool(data.y_b[mask], data.var_b[mask], wm, tau2_b)

    return AnalysisResult(
        method=f"swada_{weights.scheme}",
        gamma=PooledEffect(g_point, g_se),
        beta_a=PooledEffect(a_point, a_se),
        beta_b=PooledEffect(b_point, b_se),
        tau_estimates={"gamma": tau2_g, "beta_a": tau2_a, "beta_b": tau2_b},
        weights_a=weights,
        weights_b=weights,
        weights_gamma=weights,
        collapsible=True,
    )


def swada_analysis(
    data: MetaDataset,
    scheme: str,
    model: str = "random_effects",
    tau_method: str = "reml",
    tau2: float | None = None,
    subgroup_only_weights: bool = False,
) -> AnalysisResult:
    """SWADA analysis with the default single-subgroup policy applied.

    Schemes whose formulas put positive weight on single-subgroup studies
    (equal, study_size) are evaluated on the two-arm subset with weights
    renormalized there (exclude-and-renormalize), keeping the collapsibility
    guarantee.  With ``subgroup_only_weights=True`` the full-support weights
    are kept for the subgroup means (each column renormalized over the studies
    providing it) while gamma uses the renormalized two-arm weights; this
    breaks collapsibility and the result is flagged accordingly.
    """
    mask = data.mask_two_arm
    if subgroup_only_weights:
        return _swada_subgroup_only(data, scheme, model, tau_method, tau2)
    if mask.all():
        weights = compute_weights(data, scheme, tau2=tau2, tau_method=tau_method)
        return pool_swada(data, weights, model=model, tau_method=tau_method)
    reduced = data.two_arm_subset()
    weights_sub = compute_weights(reduced, scheme, tau2=tau2, tau_method=tau_method)
    result = pool_swada(reduced, weights_sub, model=model, tau_method=tau_method)
    # report weights aligned to the full dataset (zeros on excluded studies)
    w_full = np.zeros(len(data))
    w_full[mask] = weights_sub.array
    wv = WeightVector(w_full, weights_sub.scheme, tau2_used=weights_sub.tau2_used)
    return AnalysisResult(
        method=result.method,
        gamma=result.gamma,
        beta_a=result.beta_a,
        beta_b=result.beta_b,
        tau_estimates=result.tau_estimates,
        weights_a=wv,
        weights_b=wv,
        weights_gamma=wv,
        collapsible=True,
    )


def _swada_subgroup_only(data, scheme, model, tau_method, tau2):
    weights = compute_weights(data, scheme, tau2=tau2, tau_method=tau_method)
    w = weights.array
    re = _is_random_effects(model)
    tau2_g = contrast_tau2(data, tau_method) if re else 0.0
    tau2_a = _subgroup_tau2(data.y_a, data.var_a, tau_method) if re else 0.0
    tau2_b = _subgroup_tau2(data.y_b, data.var_b, tau_method) if re else 0.0

    mask_g = data.mask_two_arm
    wg = w[mask_g]
    if wg.sum() <= 0:
        raise ValueError("no weight remains on two-arm studies for the contrast pool")
    wg = wg / wg.sum()
    g_point, g_se = weighted_pool(data.g[mask_g], data.var_g[mask_g], wg, tau2_g)

    out = {}
    for label, y, v, m, tau2_s in (
        ("a", data.y_a, data.var_a, data.mask_a, tau2_a),
        ("b", data.y_b, data.var_b, data.mask_b, tau2_b),
    ):
        ws = w[m]
        if ws.sum() <= 0:
            raise ValueError(f"subgroup {label} has no weighted data")
        ws = ws / ws.sum()
        out[label] = PooledEffect(*weighted_pool(y[m], v[m], ws, tau2_s))

    return AnalysisResult(
        method=f"swada_{scheme}_subgroup_only",
        gamma=PooledEffect(g_point, g_se),
        beta_a=out["a"],
        beta_b=out["b"],
        tau_estimates={"gamma": tau2_g, "beta_a": tau2_a, "beta_b": tau2_b},
        weights_a=weights,
        weights_b=weights,
        weights_gamma=WeightVector(_expand(wg, mask_g), scheme, tau2_used=tau2_g),
        collapsible=False,
    )


def _expand(w_sub: np.ndarray, mask: np.ndarray) -> np.ndarray:
    w = np.zeros(len(mask))
    w[mask] = w_sub
    return w


def _subgroup_tau2(y: np.ndarray, v: np.ndarray, tau_method: str) -> float:
    finite = np.isfinite(v)
    if finite.sum() < 2:
        return 0.0
    return estimate_tau(UnivariateSample(y[finite], v[finite]), tau_method).tau2


def _is_random_effects(model: str) -> bool:
    if model in ("random_effects", "re", "random"):
        return True
    if model in ("common_effect", "ce", "common", "fixed"):
        return False
    raise ValueError(f"unknown model: {model!r}")
