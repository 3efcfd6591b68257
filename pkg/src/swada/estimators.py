"""Model-based estimator families for subgroup and interaction meta-analysis.

Five families are implemented:

* separate pooling of the two subgroup columns ("difference of averages", DA)
  and pooling of the within-study contrasts ("average difference", AD);
* the bivariate marginal maximum-likelihood model with an unstructured or a
  prevalence-structured between-study covariance;
* the two-stage within-trial framework that fixes the interaction from the
  contrasts first and estimates the common subgroup level conditional on it;
* the prevalence-adjusted model separating within-study from between-study
  interaction evidence through a study-level prevalence covariate;
* the centered collapsible model evaluated under supplied common weights.

Fit objects (:class:`BivariateFit`, :class:`PrevAdjFit`) carry the parameters
of the written model displays, where the interaction coefficient is the mean
difference of subgroup B versus subgroup A.  Every :class:`AnalysisResult`
reports ``gamma`` in the package-wide A-minus-B convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .heterogeneity import (
    UnivariateSample,
    estimate_tau,
    pool_univariate,
    weighted_pool,
)
from .model import AnalysisResult, MetaDataset, PooledEffect, validate_dataset
from .weights import WeightVector, _is_random_effects, contrast_tau2

__all__ = [
    "ConvergenceError",
    "BivariateFit",
    "PrevAdjFit",
    "estimate_da",
    "estimate_ad",
    "fit_vhas",
    "vhas_analysis",
    "fit_within_trial",
    "fit_prevalence_adjusted",
    "prevalence_adjusted_analysis",
    "fit_centered_collapsible",
]


class ConvergenceError(RuntimeError):
    """An iterative fit did not reach its convergence criterion."""


def _check(data: MetaDataset) -> None:
    violations = validate_dataset(data)
    if violations:
        raise ValueError("invalid dataset: " + "; ".join(violations))


# ---------------------------------------------------------------------------
# separate pooling: difference of averages (DA) and average difference (AD)
# ---------------------------------------------------------------------------


def estimate_da(
    data: MetaDataset,
    tau_method: str = "reml",
    model: str = "random_effects",
) -> AnalysisResult:
    """Difference of subgroup averages.

    Each subgroup column is pooled on its own (with its own heterogeneity
    estimate under a random-effects model) and the interaction is the
    difference of the pooled means; its standard error adds the two pooled
    variances since the subgroups do not overlap.
    """
    _check(data)
    re = _is_random_effects(model)
    pooled = {}
    weights = {}
    taus = {}
    for label, y, v in (("a", data.y_a, data.var_a), ("b", data.y_b, data.var_b)):
        finite = np.isfinite(v)
        if not finite.any():
            raise ValueError(f"subgroup has no data: {label}")
        sample = UnivariateSample(y, v)
        tau2 = estimate_tau(sample, tau_method).tau2 if re and finite.sum() >= 2 else 0.0
        effect, w = pool_univariate(sample, tau2)
        pooled[label] = effect
        taus[label] = tau2
        weights[label] = WeightVector(w, scheme=f"iv_{'re' if re else 'ce'}", tau2_used=tau2)
    g_point = pooled["a"].point - pooled["b"].point
    g_se = math.hypot(pooled["a"].std_err, pooled["b"].std_err)
    same_weights = np.allclose(weights["a"].array, weights["b"].array, atol=1e-12, rtol=0.0)
    return AnalysisResult(
        method=f"da_{'re' if re else 'ce'}",
        gamma=PooledEffect(g_point, g_se),
        beta_a=pooled["a"],
        beta_b=pooled["b"],
        tau_estimates={"beta_a": taus["a"], "beta_b": taus["b"]},
        weights_a=weights["a"],
        weights_b=weights["b"],
        collapsible=bool(same_weights),
    )


def estimate_ad(
    data: MetaDataset,
    tau_method: str = "reml",
    model: str = "random_effects",
) -> AnalysisResult:
    """Average of the within-study subgroup differences.

    The per-study contrasts are pooled by inverse variance; single-subgroup
    studies carry an infinite contrast variance and hence zero weight.  Under
    a random-effects model the contrast heterogeneity is estimated on the
    contrast sample itself.
    """
    _check(data)
    if not data.mask_two_arm.any():
        raise ValueError("average-difference pooling needs at least one two-arm study")
    re = _is_random_effects(model)
    sample = UnivariateSample(data.g, data.var_g)
    tau2 = 0.0
    if re and data.mask_two_arm.sum() >= 2:
        tau2 = estimate_tau(sample, tau_method).tau2
    effect, w = pool_univariate(sample, tau2)
    return AnalysisResult(
        method=f"ad_{'re' if re else 'ce'}",
        gamma=effect,
        tau_estimates={"gamma": tau2},
        weights_gamma=WeightVector(w, scheme=f"iv_{'re' if re else 'ce'}", tau2_used=tau2),
        collapsible=True,
    )


# ---------------------------------------------------------------------------
# bivariate marginal maximum likelihood
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BivariateFit:
    """Maximum-likelihood fit of the bivariate marginal model.

    The mean vector is (phi, phi + gamma), i.e. ``phi`` is the subgroup-A
    level and ``gamma`` here is the B-minus-A mean difference of the model
    display.  ``sigma`` is the fitted between-study covariance and
    ``vcov_params`` the covariance of (phi, gamma) at the fitted variance
    components.
    """

    phi: float
    gamma: float
    sigma: np.ndarray
    loglik: float
    converged: bool
    vcov_params: np.ndarray
    structure: str

    def analysis(self, label: str = "vhas") -> AnalysisResult:
        return _bivariate_to_analysis(self.phi, self.gamma, self.vcov_params, label)


def _bivariate_to_analysis(phi, gamma_b_minus_a, vcov, method) -> AnalysisResult:
    var_phi = vcov[0, 0]
    var_g = vcov[1, 1]
    cov = vcov[0, 1]
    beta_a = PooledEffect(phi, math.sqrt(max(var_phi, 0.0)))
    beta_b = PooledEffect(phi + gamma_b_minus_a, math.sqrt(max(var_phi + var_g + 2 * cov, 0.0)))
    gamma = PooledEffect(-gamma_b_minus_a, math.sqrt(max(var_g, 0.0)))
    return AnalysisResult(
        method=method,
        gamma=gamma,
        beta_a=beta_a,
        beta_b=beta_b,
        collapsible=True,
    )


def _study_blocks(data: MetaDataset):
    """Per-study observation vectors, design rows and sampling covariances."""
    blocks = []
    for s in data.studies:
        if s.two_arm:
            y = np.array([s.arm_a.effect, s.arm_b.effect])
            x = np.array([[1.0, 0.0], [1.0, 1.0]])
            sv = np.diag([s.arm_a.variance, s.arm_b.variance])
            idx = (0, 1)
        elif s.arm_a.present:
            y = np.array([s.arm_a.effect])
            x = np.array([[1.0, 0.0]])
            sv = np.array([[s.arm_a.variance]])
            idx = (0,)
        else:
            y = np.array([s.arm_b.effect])
            x = np.array([[1.0, 1.0]])
            sv = np.array([[s.arm_b.variance]])
            idx = (1,)
        blocks.append((y, x, sv, idx, s.prevalence_b))
    return blocks


def _sigma_full(params: np.ndarray) -> np.ndarray:
    a, b, r = params
    rho = 0.999 * math.tanh(r)
    return np.array([[a * a, rho * a * b], [rho * a * b, b * b]])


def _sigma_full_grads(params: np.ndarray):
    a, b, r = params
    rho = 0.999 * math.tanh(r)
    drho = 0.999 * (1.0 - math.tanh(r) ** 2)
    da = np.array([[2 * a, rho * b], [rho * b, 0.0]])
    db = np.array([[0.0, rho * a], [rho * a, 2 * b]])
    dr = np.array([[0.0, drho * a * b], [drho * a * b, 0.0]])
    return [da, db, dr]


def _sigma_structured(params: np.ndarray, p: float) -> np.ndarray:
    t1, t2 = params
    q = 1.0 - p
    return t1 * t1 * np.ones((2, 2)) + t2 * t2 * np.array([[p * p, -p * q], [-p * q, q * q]])


def _sigma_structured_grads(params: np.ndarray, p: float):
    t1, t2 = params
    q = 1.0 - p
    d1 = 2 * t1 * np.ones((2, 2))
    d2 = 2 * t2 * np.array([[p * p, -p * q], [-p * q, q * q]])
    return [d1, d2]


def _vhas_negloglik_grad(theta: np.ndarray, blocks, structure: str):
    phi, gamma = theta[0], theta[1]
    sparams = theta[2:]
    beta = np.array([phi, gamma])
    nll = 0.0
    grad = np.zeros_like(theta)
    for y, x, sv, idx, p in blocks:
        if structure == "full":
            sigma = _sigma_full(sparams)
            sgrads = _sigma_full_grads(sparams)
        else:
            sigma = _sigma_structured(sparams, p)
            sgrads = _sigma_structured_grads(sparams, p)
        v = sv + sigma[np.ix_(idx, idx)]
        r = y - x @ beta
        vinv = np.linalg.inv(v)
        sign, logdet = np.linalg.slogdet(v)
        if sign <= 0:
            return np.inf, grad
        vr = vinv @ r
        nll += 0.5 * (len(y) * math.log(2 * math.pi) + logdet + float(r @ vr))
        grad[:2] += -(x.T @ vr)
        for i, ds in enumerate(sgrads):
            dsub = ds[np.ix_(idx, idx)]
            grad[2 + i] += 0.5 * (np.trace(vinv @ dsub) - float(vr @ dsub @ vr))
    return nll, grad


def _gls_fixed_sigma(blocks, sigma: np.ndarray):
    """Closed-form GLS for (phi, gamma) at a fixed between-study covariance."""
    xtx = np.zeros((2, 2))
    xty = np.zeros(2)
    for y, x, sv, idx, _ in blocks:
        v = sv + sigma[np.ix_(idx, idx)]
        vinv = np.linalg.inv(v)
        xtx += x.T @ vinv @ x
        xty += x.T @ vinv @ y
    vcov = np.linalg.inv(xtx)
    beta = vcov @ xty
    return beta, vcov


def fit_vhas(
    data: MetaDataset,
    sigma_structure: str = "full",
    sigma_fixed: np.ndarray | None = None,
    max_iter: int = 500,
) -> BivariateFit:
    """Bivariate marginal maximum-likelihood fit.

    ``sigma_structure='full'`` parameterizes the between-study covariance by
    (tau_a, tau_b, rho) with the correlation bounded to [-0.999, 0.999];
    ``'tau1_tau2'`` uses the prevalence-structured covariance with each
    study's own subgroup-B prevalence.  Single-subgroup studies contribute
    their one finite component through the corresponding 1x1 marginal.  With
    ``sigma_fixed`` the variance components are held at the given matrix and
    only (phi, gamma) are estimated, in closed form.

    Raises :class:`ConvergenceError` when the gradient max-norm has not
    fallen below 1e-6 after ``max_iter`` quasi-Newton iterations.
    """
    _check(data)
    if len(data) < 2 and sigma_fixed is None:
        raise ValueError("bivariate ML fit needs at least 2 studies")
    blocks = _study_blocks(data)

    if sigma_fixed is not None:
        sigma = np.asarray(sigma_fixed, dtype=float)
        beta, vcov = _gls_fixed_sigma(blocks, sigma)
        nll, _ = _vhas_negloglik_grad_fixed(beta, blocks, sigma)
        return BivariateFit(
            phi=float(beta[0]),
            gamma=float(beta[1]),
            sigma=sigma,
            loglik=-nll,
            converged=True,
            vcov_params=vcov,
            structure="fixed",
        )

    if sigma_structure not in ("full", "tau1_tau2"):
        raise ValueError(f"unknown sigma structure: {sigma_structure!r}")
    n_sigma = 3 if sigma_structure == "full" else 2

    # moment-based starting values plus a few fixed dispersed restarts
    da = estimate_da(data, tau_method="dl", model="random_effects")
    phi0 = da.beta_a.point
    gamma0 = da.beta_b.point - da.beta_a.point
    t0 = math.sqrt(max(da.tau_estimates["beta_a"], da.tau_estimates["beta_b"], 1e-4))
    starts = [
        np.array([phi0, gamma0] + [t0, t0, 0.5][:n_sigma]),
        np.array([phi0, gamma0] + [0.01, 0.01, 0.0][:n_sigma]),
        np.array([phi0, gamma0] + [5 * t0, 5 * t0, -0.5][:n_sigma]),
        np.array([phi0, gamma0] + [t0, 0.3 * t0, 0.9][:n_sigma]),
    ]
    best = None
    for x0 in starts:
        res = minimize(
            _vhas_negloglik_grad,
            x0,
            args=(blocks, sigma_structure),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": max_iter, "gtol": 1e-8, "ftol": 1e-15},
        )
        if best is None or res.fun < best.fun:
            best = res
    nll, grad = _vhas_negloglik_grad(best.x, blocks, sigma_structure)
    converged = bool(np.max(np.abs(grad)) < 1e-6)
    if not converged:
        raise ConvergenceError(
            f"bivariate ML fit did not converge (gradient max-norm {np.max(np.abs(grad)):.2e})"
        )
    theta = best.x
    sigma = _sigma_full(theta[2:]) if sigma_structure == "full" else None
    if sigma_structure == "full":
        _, vcov = _gls_fixed_sigma(blocks, sigma)
    else:
        # per-study covariance: fixed-effects vcov accumulated study by study
        xtx = np.zeros((2, 2))
        for y, x, sv, idx, p in blocks:
            v = sv + _sigma_structured(theta[2:], p)[np.ix_(idx, idx)]
            xtx += x.T @ np.linalg.inv(v) @ x
        vcov = np.linalg.inv(xtx)
        sigma = _sigma_structured(theta[2:], 0.5)
    return BivariateFit(
        phi=float(theta[0]),
        gamma=float(theta[1]),
        sigma=sigma,
        loglik=-nll,
        converged=converged,
        vcov_params=vcov,
        structure=sigma_structure,
    )


def _vhas_negloglik_grad_fixed(beta: np.ndarray, blocks, sigma: np.ndarray):
    nll = 0.0
    for y, x, sv, idx, _ in blocks:
        v = sv + sigma[np.ix_(idx, idx)]
        r = y - x @ beta
        vinv = np.linalg.inv(v)
        _, logdet = np.linalg.slogdet(v)
        nll += 0.5 * (len(y) * math.log(2 * math.pi) + logdet + float(r @ vinv @ r))
    return nll, None


def vhas_loglik(data: MetaDataset, phi: float, gamma: float, sigma: np.ndarray) -> float:
    """Log-likelihood of the bivariate model at arbitrary parameter values."""
    blocks = _study_blocks(data)
    nll, _ = _vhas_negloglik_grad_fixed(np.array([phi, gamma]), blocks, np.asarray(sigma, float))
    return -nll


def vhas_analysis(data: MetaDataset, sigma_structure: str = "full") -> AnalysisResult:
    """Bivariate ML fit reported in the package's A-minus-B convention."""
    fit = fit_vhas(data, sigma_structure=sigma_structure)
    return fit.analysis(label=f"vhas_{sigma_structure}")


# ---------------------------------------------------------------------------
# within-trial two-stage framework
# ---------------------------------------------------------------------------


def fit_within_trial(
    data: MetaDataset,
    tau_method: str = "reml",
    model: str = "random_effects",
    naive_stage2: bool = False,
) -> AnalysisResult:
    """Two-stage within-trial estimator.

    Stage 1 fixes the interaction at the pooled within-study contrast (the AD
    estimate).  Stage 2 stacks the subgroup-B observations together with the
    subgroup-A observations shifted down by the estimated interaction and
    pools the stack to a common level by generalized least squares.  The
    covariance of the stack propagates the stage-1 uncertainty exactly
    through the linear two-stage map, including the covariances it induces
    between entries; ``naive_stage2=True`` keeps only the variance inflation
    on the shifted entries and ignores the induced covariances.
    """
    stage1 = estimate_ad(data, tau_method=tau_method, model=model)
    gamma_hat = stage1.gamma.point
    var_gamma = stage1.gamma.std_err**2
    c = stage1.weights_gamma.array  # contrast weights, zero on single-subgroup studies
    re = _is_random_effects(model)

    mask_a = data.mask_a
    mask_b = data.mask_b
    idx_a = np.flatnonzero(mask_a)
    idx_b = np.flatnonzero(mask_b)
    n_a, n_b = len(idx_a), len(idx_b)
    n_obs = n_a + n_b
    k = len(data)

    # base vector z = (y_a over present-A studies, y_b over present-B studies)
    base_var = np.concatenate([data.var_a[idx_a], data.var_b[idx_b]])
    z = np.concatenate([data.y_a[idx_a], data.y_b[idx_b]])
    col_a = {j: i for i, j in enumerate(idx_a)}
    col_b = {j: n_a + i for i, j in enumerate(idx_b)}

    # gamma-hat as a row over z: sum_j c_j (y_aj - y_bj)
    row_gamma = np.zeros(n_obs)
    for j in range(k):
        if c[j] != 0.0:
            row_gamma[col_a[j]] += c[j]
            row_gamma[col_b[j]] -= c[j]

    # stage-2 observations: adjusted A entries first, then raw B entries
    lmap = np.zeros((n_obs, n_obs))
    values = np.zeros(n_obs)
    for i, j in enumerate(idx_a):
        lmap[i, col_a[j]] = 1.0
        lmap[i] -= row_gamma
        values[i] = z[col_a[j]] - gamma_hat
    for i, j in enumerate(idx_b):
        lmap[n_a + i, col_b[j]] = 1.0
        values[n_a + i] = z[col_b[j]]

    if naive_stage2:
        diag = np.concatenate([data.var_a[idx_a] + var_gamma, data.var_b[idx_b]])
        omega_sampling = np.diag(diag)
    else:
        omega_sampling = lmap @ np.diag(base_var) @ lmap.T

    tau2_phi = 0.0
    if re and n_obs >= 2:
        d = np.clip(np.diag(omega_sampling), 1e-12, None)
        tau2_phi = estimate_tau(UnivariateSample(values, d), tau_method).tau2
    omega = omega_sampling + tau2_phi * np.eye(n_obs)

    one = np.ones(n_obs)
    omega_pinv = np.linalg.pinv(omega, hermitian=True)
    denom = float(one @ omega_pinv @ one)
    if denom <= 0:
        raise ConvergenceError("within-trial stage 2: degenerate pooled precision")
    a_row = (omega_pinv @ one) / denom  # observation-space weights of phi-hat
    phi_hat = float(a_row @ values)
    var_phi = float(a_row @ omega @ a_row)

    # cov(phi-hat, gamma-hat) through the shared base vector
    r_phi_base = lmap.T @ a_row
    cov_pg = float(np.sum(r_phi_base * base_var * row_gamma))

    beta_b = PooledEffect(phi_hat, math.sqrt(max(var_phi, 0.0)))
    beta_a = PooledEffect(
        phi_hat + gamma_hat, math.sqrt(max(var_phi + var_gamma + 2.0 * cov_pg, 0.0))
    )
    taus = dict(stage1.tau_estimates)
    taus["phi"] = tau2_phi
    return AnalysisResult(
        method=f"within_trial_{'re' if re else 'ce'}",
        gamma=stage1.gamma,
        beta_a=beta_a,
        beta_b=beta_b,
        tau_estimates=taus,
        weights_gamma=stage1.weights_gamma,
        collapsible=True,
    )


# ---------------------------------------------------------------------------
# prevalence-adjusted model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrevAdjFit:
    """Prevalence-adjusted fit separating within- from between-study evidence.

    Parameters follow the model display: the subgroup means are
    (phi + delta * p, phi + delta * p + gamma_w), so ``gamma_w`` is the
    B-minus-A within-study interaction and ``delta`` the between-study
    prevalence slope.  ``delta`` is ``None`` when the included studies share a
    common prevalence, in which case the reduced constant-prevalence model was
    fitted and between-study evidence does not arise.  ``vcov_params`` is
    ordered (phi, delta, gamma_w), dropping the delta row when absent.
    """

    phi: float
    delta: float | None
    gamma_w: float
    tau1: float
    tau2: float
    vcov_params: np.ndarray
    converged: bool

    @property
    def gamma_agg(self) -> float | None:
        """Between-study interaction gamma_w + delta; None without delta."""
        if self.delta is None:
            return None
        return self.gamma_w + self.delta


def _reml_meta_regression(y: np.ndarray, v: np.ndarray, x: np.ndarray):
    """REML heterogeneity and GLS coefficients for a small meta-regression."""
    n, p = x.shape

    def reml_obj(tau2: float) -> float:
        w = 1.0 / (v + tau2)
        xtwx = x.T @ (x * w[:, None])
        sign, logdet = np.linalg.slogdet(xtwx)
        if sign <= 0:
            return np.inf
        beta = np.linalg.solve(xtwx, x.T @ (w * y))
        resid = y - x @ beta
        return float(np.sum(np.log(v + tau2)) + logdet + np.sum(w * resid**2))

    tau2 = 0.0
    if n > p:
        upper = 10.0 * float(np.var(y, ddof=1)) if n > 1 else 1.0
        if upper > 0:
            res = minimize_scalar(
                reml_obj, bounds=(0.0, upper), method="bounded",
                options={"xatol": 1e-10, "maxiter": 500},
            )
            tau2 = float(res.x)
            if reml_obj(0.0) <= res.fun + 1e-12:
                tau2 = 0.0
    w = 1.0 / (v + tau2)
    xtwx = x.T @ (x * w[:, None])
    vcov = np.linalg.inv(xtwx)
    beta = vcov @ (x.T @ (w * y))
    return beta, vcov, tau2, w


def fit_prevalence_adjusted(data: MetaDataset, tau_method: str = "reml") -> PrevAdjFit:
    """Fit the prevalence-adjusted model by its exact margin decomposition.

    The within-study interaction and its heterogeneity are identified by the
    contrast margin alone (every contrast is free of phi, delta and of the
    shared level heterogeneity), so (gamma_w, tau2) are estimated by the
    inverse-variance contrast pool.  The precision-weighted per-study means
    are sampling-independent of the contrasts and carry the level parameters;
    after removing each study's share of the fitted interaction they are
    regressed on prevalence by GLS with REML level heterogeneity, yielding
    (phi, delta, tau1).  When prevalence is constant across studies the slope
    is dropped and the reduced constant-prevalence model is fitted.
    """
    _check(data)
    ad = estimate_ad(data, tau_method=tau_method, model="random_effects")
    gamma_w = -ad.gamma.point  # fit-level convention: B minus A
    var_gamma = ad.gamma.std_err**2
    tau2 = math.sqrt(ad.tau_estimates["gamma"]) if ad.tau_estimates["gamma"] > 0 else 0.0

    va, vb = data.var_a, data.var_b
    ya, yb = data.y_a, data.y_b
    k = len(data)
    m = np.zeros(k)
    s2m = np.zeros(k)
    h_b = np.zeros(k)
    for j, s in enumerate(data.studies):
        if s.two_arm:
            wa, wb = 1.0 / va[j], 1.0 / vb[j]
            h_b[j] = wb / (wa + wb)
            m[j] = (wa * ya[j] + wb * yb[j]) / (wa + wb)
            s2m[j] = 1.0 / (wa + wb)
        elif s.arm_a.present:
            h_b[j], m[j], s2m[j] = 0.0, ya[j], va[j]
        else:
            h_b[j], m[j], s2m[j] = 1.0, yb[j], vb[j]

    p = data.prevalence_b
    with_delta = bool(np.var(p) >= 1e-10)
    if with_delta and k < 3:
        raise ValueError("prevalence-adjusted fit needs >=3 studies to estimate delta")
    x = np.column_stack([np.ones(k), p]) if with_delta else np.ones((k, 1))
    u = m - h_b * gamma_w
    v_adj = s2m + h_b**2 * var_gamma
    beta, vcov_levels, tau1_sq, _ = _reml_meta_regression(u, v_adj, x)

    # assemble the joint (phi, delta, gamma_w) covariance: the level rows are
    # shifted by the shared gamma estimate through coefficient c = A h
    w = 1.0 / (v_adj + tau1_sq)
    a_mat = vcov_levels @ (x.T * w[None, :])  # maps responses to coefficients
    c = a_mat @ h_b
    n_lev = x.shape[1]
    vcov = np.zeros((n_lev + 1, n_lev + 1))
    vcov[:n_lev, :n_lev] = vcov_levels + np.outer(c, c) * var_gamma
    vcov[:n_lev, n_lev] = -c * var_gamma
    vcov[n_lev, :n_lev] = -c * var_gamma
    vcov[n_lev, n_lev] = var_gamma

    return PrevAdjFit(
        phi=float(beta[0]),
        delta=float(beta[1]) if with_delta else None,
        gamma_w=float(gamma_w),
        tau1=math.sqrt(max(tau1_sq, 0.0)),
        tau2=tau2,
        vcov_params=vcov,
        converged=True,
    )


def prevalence_adjusted_analysis(data: MetaDataset, tau_method: str = "reml") -> AnalysisResult:
    """Prevalence-adjusted fit reported in the A-minus-B convention.

    Subgroup levels are evaluated at the precision-weighted mean prevalence of
    the included studies; the interaction is the within-study component, whose
    point and standard error coincide with the AD pool by construction.
    """
    fit = fit_prevalence_adjusted(data, tau_method=tau_method)
    ad = estimate_ad(data, tau_method=tau_method, model="random_effects")

    if fit.delta is None:
        row_a = np.array([1.0, 0.0])
        mean_a = fit.phi
    else:
        pbar = float(np.average(data.prevalence_b, weights=_level_weights(data, fit)))
        row_a = np.array([1.0, pbar, 0.0])
        mean_a = fit.phi + fit.delta * pbar
    row_b = row_a.copy()
    row_b[-1] = 1.0
    var_a = float(row_a @ fit.vcov_params @ row_a)
    var_b = float(row_b @ fit.vcov_params @ row_b)
    beta_a = PooledEffect(mean_a, math.sqrt(max(var_a, 0.0)))
    beta_b = PooledEffect(mean_a + fit.gamma_w, math.sqrt(max(var_b, 0.0)))
    return AnalysisResult(
        method="prev_adjusted",
        gamma=ad.gamma,
        beta_a=beta_a,
        beta_b=beta_b,
        tau_estimates={"tau1_sq": fit.tau1**2, "tau2_sq": fit.tau2**2},
        weights_gamma=ad.weights_gamma,
        collapsible=True,
    )


def _level_weights(data: MetaDataset, fit: PrevAdjFit) -> np.ndarray:
    """GLS precision weights of the level margin, for prevalence averaging."""
    va, vb = data.var_a, data.var_b
    k = len(data)
    s2m = np.zeros(k)
    h_b = np.zeros(k)
    for j, s in enumerate(data.studies):
        if s.two_arm:
            wa, wb = 1.0 / va[j], 1.0 / vb[j]
            s2m[j] = 1.0 / (wa + wb)
            h_b[j] = wb / (wa + wb)
        elif s.arm_a.present:
            s2m[j], h_b[j] = va[j], 0.0
        else:
            s2m[j], h_b[j] = vb[j], 1.0
    var_gamma = fit.vcov_params[-1, -1]
    return 1.0 / (s2m + h_b**2 * var_gamma + fit.tau1**2)


# ---------------------------------------------------------------------------
# centered collapsible model
# ---------------------------------------------------------------------------


def fit_centered_collapsible(
    data: MetaDataset,
    weights: WeightVector,
    tau_method: str = "reml",
    model: str = "random_effects",
) -> AnalysisResult:
    """Centered collapsible model evaluated under supplied common weights.

    The model places the subgroup means at phi -/+ half the interaction with
    the prevalence-structured heterogeneity evaluated at prevalence one half,
    under which the per-study midpoint and contrast decouple: the midpoint
    carries variance (s_a^2+s_b^2)/4 + tau1^2 and the contrast
    s_a^2+s_b^2 + tau2^2.  Both are pooled with the supplied weights and
    mapped back to subgroup means, which reproduces the common-weight subgroup
    pools exactly while the interval widths follow the centered model.
    """
    w = weights.array if isinstance(weights, WeightVector) else np.asarray(weights, float)
    if len(w) != len(data):
        raise ValueError("weight vector does not align with the dataset")
    mask = data.mask_two_arm
    if np.any(w[~mask] > 0):
        raise ValueError("centered model: positive weight on a single-subgroup study")
    re = _is_random_effects(model)
    wm = w[mask]

    g = data.g[mask]
    var_g = data.var_g[mask]
    mid = 0.5 * (data.y_a[mask] + data.y_b[mask])
    var_mid = 0.25 * var_g

    tau2_sq = 0.0
    tau1_sq = 0.0
    if re and mask.sum() >= 2:
        tau2_sq = estimate_tau(UnivariateSample(g, var_g), tau_method).tau2
        tau1_sq = estimate_tau(UnivariateSample(mid, var_mid), tau_method).tau2

    g_point, g_se = weighted_pool(g, var_g, wm, tau2_sq)
    phi_point, phi_se = weighted_pool(mid, var_mid, wm, tau1_sq)
    # sampling covariance of (midpoint, contrast) within a study: (s_a^2 - s_b^2)/2
    cov = float(np.dot(wm * wm, 0.5 * (data.var_a[mask] - data.var_b[mask])))

    var_a = phi_se**2 + 0.25 * g_se**2 + cov
    var_b = phi_se**2 + 0.25 * g_se**2 - cov
    beta_a = PooledEffect(phi_point + 0.5 * g_point, math.sqrt(max(var_a, 0.0)))
    beta_b = PooledEffect(phi_point - 0.5 * g_point, math.sqrt(max(var_b, 0.0)))
    scheme = weights.scheme if isinstance(weights, WeightVector) else "custom"
    return AnalysisResult(
        method=f"centered_{scheme}",
        gamma=PooledEffect(g_point, g_se),
        beta_a=beta_a,
        beta_b=beta_b,
        tau_estimates={"tau1_sq": tau1_sq, "tau2_sq": tau2_sq},
        weights_a=weights if isinstance(weights, WeightVector) else None,
        weights_b=weights if isinstance(weights, WeightVector) else None,
        weights_gamma=weights if isinstance(weights, WeightVector) else None,
        collapsible=True,
    )
