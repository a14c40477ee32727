"""Estimators of the arm means E(Y^1), E(Y^0) and their contrasts.

All estimators return an `ArmMeans`. Adjusted estimators also carry the
per-patient predictions h1(X_i), h0(X_i) that the influence-function variance
needs; the unadjusted and IPW estimators carry their influence contributions
directly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .data import EstimandSpec, ModelFormula, Scale, TrialDataset
from .errors import BoundaryEstimate, CovAdjError, DegenerateRandomization, InvalidConfig
from .glm import Link, WorkingModelFit, as_link, fit_glm, predict_mean, robust_covariance


class Method(str, enum.Enum):
    UNADJUSTED = "unadjusted"
    STANDARDIZATION_SEPARATE = "standardization_separate"
    STANDARDIZATION_POOLED = "standardization_pooled"
    ANCOVA = "ancova"
    ANHECOVA = "anhecova"
    IPW = "ipw"
    AIPW_GENERAL = "aipw_general"


@dataclass(frozen=True)
class EstimatorConfig:
    method: Method = Method.UNADJUSTED
    formula: ModelFormula = field(default_factory=ModelFormula)
    link: Link = Link.IDENTITY
    name: str = ""

    def __post_init__(self):
        method = Method(self.method)
        formula = self.formula
        if not isinstance(formula, ModelFormula):
            formula = ModelFormula(tuple(formula))
        link = as_link(self.link)
        if method in (Method.ANCOVA, Method.ANHECOVA) and link is not Link.IDENTITY:
            raise InvalidConfig(f"{method.value} is a linear estimator; link must be identity",
                                operation="EstimatorConfig")
        if method in (Method.STANDARDIZATION_SEPARATE, Method.STANDARDIZATION_POOLED) \
                and not formula.include_intercept:
            raise InvalidConfig("standardization working models must include an intercept",
                                operation="EstimatorConfig")
        object.__setattr__(self, "method", method)
        object.__setattr__(self, "formula", formula)
        object.__setattr__(self, "link", link)
        object.__setattr__(self, "name", self.name or method.value)


@dataclass(frozen=True, eq=False)
class ArmMeans:
    """Estimated arm means plus what inference needs downstream.

    ``influence1``/``influence0``, when set, are the mean-zero per-patient
    influence contributions of ``mu1_hat``/``mu0_hat`` and take precedence
    over the prediction-based expression.
    """

    mu1_hat: float
    mu0_hat: float
    pi_hat: float
    h1_predictions: np.ndarray
    h0_predictions: np.ndarray
    method: str = ""
    n1: int = 0
    n0: int = 0
    p1: int = 0
    p0: int = 0
    influence1: np.ndarray | None = None
    influence0: np.ndarray | None = None
    fits: dict = field(default_factory=dict)
    conditional: dict | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def difference(self) -> float:
        return self.mu1_hat - self.mu0_hat


def _pi_hat(data):
    pi = data.n1 / data.n
    if not 0.0 < pi < 1.0:
        raise DegenerateRandomization("empirical randomization probability is 0 or 1",
                                      operation="estimate")
    return pi


def _tag_arm(exc: CovAdjError, arm: int) -> CovAdjError:
    exc.context["arm"] = arm
    exc.message = f"arm {arm}: {exc.message}"
    exc.args = (exc.message,)
    return exc


def _fit_summary(fit: WorkingModelFit) -> dict:
    return {"converged": fit.converged, "iterations": fit.iterations,
            "deviance": fit.deviance, "n_obs": fit.n_obs,
            "coefficients": [float(c) for c in fit.coefficients]}


def estimate_unadjusted(data: TrialDataset) -> ArmMeans:
    data.require_complete_outcome("estimate_unadjusted")
    pi = _pi_hat(data)
    y, z = data.outcome, data.arm
    mu1 = float(y[z == 1].mean())
    mu0 = float(y[z == 0].mean())
    zeros = np.zeros(data.n)
    return ArmMeans(mu1, mu0, pi, zeros, zeros.copy(), method="unadjusted",
                    n1=data.n1, n0=data.n0,
                    influence1=z * (y - mu1) / pi,
                    influence0=(1 - z) * (y - mu0) / (1 - pi))


def fit_arm_models(data: TrialDataset, formula: ModelFormula, link, *,
                   rows=None, weights=None):
    """Fit one working model per arm and predict for every patient.

    `rows` restricts which patients enter the fits (e.g. complete cases);
    `weights` are per-patient fitting weights. Returns
    ``(design, {1: fit1, 0: fit0}, {1: h1, 0: h0})``.
    """
    link = as_link(link)
    design = formula.design(data)
    rows = np.ones(data.n, bool) if rows is None else np.asarray(rows, bool)
    w = np.ones(data.n) if weights is None else np.asarray(weights, float)
    y = np.where(data.outcome_missing, 0.0, data.outcome)
    fits, preds = {}, {}
    for arm in (1, 0):
        arm_w = np.where(rows & (data.arm == arm), w, 0.0)
        try:
            fit = fit_glm(y, design, link, weights=arm_w, formula=formula)
        except (CovAdjError) as exc:
            raise _tag_arm(exc, arm)
        except ValueError as exc:
            raise InvalidConfig(f"arm {arm}: {exc}", operation="fit_arm_models") from None
        fits[arm] = fit
        preds[arm] = predict_mean(fit, design)
    return design, fits, preds


def estimate_standardization_separate(data: TrialDataset, formula: ModelFormula,
                                      link="identity") -> ArmMeans:
    """Separate per-arm working models; average predictions over all patients."""
    data.require_complete_outcome("estimate_standardization_separate")
    if not formula.include_intercept:
        raise InvalidConfig("standardization requires an intercept", operation="standardization")
    pi = _pi_hat(data)
    _, fits, preds = fit_arm_models(data, formula, link)
    return ArmMeans(float(preds[1].mean()), float(preds[0].mean()), pi, preds[1], preds[0],
                    method="standardization_separate", n1=data.n1, n0=data.n0,
                    p1=fits[1].n_params_excluding_intercept,
                    p0=fits[0].n_params_excluding_intercept,
                    fits={"arm1": _fit_summary(fits[1]), "arm0": _fit_summary(fits[0])})


def _pooled_design(data, formula):
    terms = formula.term_matrix(data)
    ones = np.ones((data.n, 1))
    z = data.arm[:, None].astype(float)
    return (np.hstack([ones, z, terms]), np.hstack([ones, np.ones_like(z), terms]),
            np.hstack([ones, np.zeros_like(z), terms]))


def estimate_standardization_pooled(data: TrialDataset, formula: ModelFormula,
                                    link="identity") -> ArmMeans:
    """One model of Y on (1, Z, X-terms); average predictions with Z set to 1 and 0.

    The treatment coefficient, with its sandwich standard error, is returned in
    ``conditional`` for the coefficient-based Wald test.
    """
    data.require_complete_outcome("estimate_standardization_pooled")
    link = as_link(link)
    pi = _pi_hat(data)
    design, design1, design0 = _pooled_design(data, formula)
    try:
        fit = fit_glm(data.outcome, design, link)
    except ValueError as exc:
        raise InvalidConfig(str(exc), operation="estimate_standardization_pooled") from None
    h1 = predict_mean(fit, design1)
    h0 = predict_mean(fit, design0)
    cov = robust_covariance(fit, data.outcome, design)
    beta1 = float(fit.coefficients[1])
    p = 1 + formula.n_terms
    return ArmMeans(float(h1.mean()), float(h0.mean()), pi, h1, h0,
                    method="standardization_pooled", n1=data.n1, n0=data.n0, p1=p, p0=p,
                    fits={"pooled": _fit_summary(fit)},
                    conditional={"coefficient": beta1, "se": float(math.sqrt(cov[1, 1])),
                                 "link": link.value})


def general_form_terms(data: TrialDataset, h1, h0):
    """Per-patient summands of the general augmented estimator, split by arm."""
    data.require_complete_outcome("estimate_general_form")
    pi = _pi_hat(data)
    h1 = np.asarray(h1, float)
    h0 = np.asarray(h0, float)
    if h1.shape != (data.n,) or h0.shape != (data.n,):
        raise ValueError("prediction vectors must have length n")
    y, z = data.outcome, data.arm
    t1 = z * y / pi - (z - pi) / pi * h1
    t0 = (1 - z) * y / (1 - pi) + (z - pi) / (1 - pi) * h0
    return pi, t1, t0


def estimate_general_form(data: TrialDataset, h1, h0, *, method="aipw_general") -> ArmMeans:
    """Augmented estimator for arbitrary prediction vectors h1, h0.

    mu1 = mean[Z Y / pi - (Z - pi) / pi * h1] and
    mu0 = mean[(1 - Z) Y / (1 - pi) + (Z - pi) / (1 - pi) * h0];
    their difference is the risk-difference form.
    """
    pi, t1, t0 = general_form_terms(data, h1, h0)
    return ArmMeans(float(t1.mean()), float(t0.mean()), pi, np.asarray(h1, float),
                    np.asarray(h0, float), method=method, n1=data.n1, n0=data.n0)


def general_form_difference(data: TrialDataset, h1, h0) -> float:
    """Risk-difference version, summed term by term as a single expression."""
    data.require_complete_outcome("estimate_general_form")
    pi = _pi_hat(data)
    y, z = data.outcome, data.arm
    h1 = np.asarray(h1, float)
    h0 = np.asarray(h0, float)
    terms = (z * y / pi - (1 - z) * y / (1 - pi)
             - (z - pi) / (pi * (1 - pi)) * ((1 - pi) * h1 + pi * h0))
    return float(terms.mean())


def estimate_aipw(data: TrialDataset, formula: ModelFormula, link="identity") -> ArmMeans:
    """General augmented form with per-arm GLM predictions."""
    data.require_complete_outcome("estimate_aipw")
    _, fits, preds = fit_arm_models(data, formula, link)
    am = estimate_general_form(data, preds[1], preds[0])
    return ArmMeans(am.mu1_hat, am.mu0_hat, am.pi_hat, am.h1_predictions, am.h0_predictions,
                    method="aipw_general", n1=data.n1, n0=data.n0,
                    p1=fits[1].n_params_excluding_intercept,
                    p0=fits[0].n_params_excluding_intercept,
                    fits={"arm1": _fit_summary(fits[1]), "arm0": _fit_summary(fits[0])})


def estimate_ancova(data: TrialDataset, formula: ModelFormula) -> ArmMeans:
    """OLS of Y on (1, Z, X-terms); the Z coefficient is the contrast."""
    data.require_complete_outcome("estimate_ancova")
    design, design1, design0 = _pooled_design(data, formula)
    fit = fit_glm(data.outcome, design, Link.IDENTITY)
    h1 = design1 @ fit.coefficients
    h0 = design0 @ fit.coefficients
    am = estimate_general_form(data, h1, h0, method="ancova")
    p = 1 + formula.n_terms
    return ArmMeans(am.mu1_hat, am.mu0_hat, am.pi_hat, h1, h0, method="ancova",
                    n1=data.n1, n0=data.n0, p1=p, p0=p, fits={"ols": _fit_summary(fit)},
                    diagnostics={"treatment_coefficient": float(fit.coefficients[1])})


def estimate_anhecova(data: TrialDataset, formula: ModelFormula) -> ArmMeans:
    """OLS of Y on (1, Z, Xc, Z*Xc), covariate terms centred at the full-sample mean."""
    data.require_complete_outcome("estimate_anhecova")
    terms = formula.term_matrix(data)
    centred = terms - terms.mean(axis=0)
    z = data.arm.astype(float)[:, None]
    ones = np.ones((data.n, 1))
    design = np.hstack([ones, z, centred, z * centred])
    fit = fit_glm(data.outcome, design, Link.IDENTITY)
    design1 = np.hstack([ones, np.ones_like(z), centred, centred])
    design0 = np.hstack([ones, np.zeros_like(z), centred, np.zeros_like(centred)])
    h1 = design1 @ fit.coefficients
    h0 = design0 @ fit.coefficients
    am = estimate_general_form(data, h1, h0, method="anhecova")
    k = formula.n_terms
    return ArmMeans(am.mu1_hat, am.mu0_hat, am.pi_hat, h1, h0, method="anhecova",
                    n1=data.n1, n0=data.n0, p1=k, p0=k, fits={"ols": _fit_summary(fit)},
                    diagnostics={"treatment_coefficient": float(fit.coefficients[1])})


def estimate_ipw(data: TrialDataset, formula: ModelFormula) -> ArmMeans:
    """Hajek-normalised inverse probability of treatment weighting.

    The treatment probability e(X) comes from a logistic regression of Z on
    the formula terms. The influence contributions include the correction
    for estimating e(X).
    """
    data.require_complete_outcome("estimate_ipw")
    pi = _pi_hat(data)
    design = formula.design(data)
    z = data.arm.astype(float)
    y = data.outcome
    try:
        fit = fit_glm(z, design, Link.LOGIT, formula=formula)
    except CovAdjError as exc:
        exc.message = f"treatment model: {exc.message}"
        exc.args = (exc.message,)
        raise
    e = predict_mean(fit, design)
    w1 = z / e
    w0 = (1 - z) / (1 - e)
    mu1 = float(np.sum(w1 * y) / np.sum(w1))
    mu0 = float(np.sum(w0 * y) / np.sum(w0))

    n = data.n
    v = e * (1 - e)
    a_inv = np.linalg.inv((design * v[:, None]).T @ design / n)
    score_alpha = design * (z - e)[:, None]
    d1 = -(design * (z * (y - mu1) * (1 - e) / e)[:, None]).mean(axis=0)
    d0 = (design * ((1 - z) * (y - mu0) * e / (1 - e))[:, None]).mean(axis=0)
    psi1 = (w1 * (y - mu1) + score_alpha @ (a_inv @ d1)) / w1.mean()
    psi0 = (w0 * (y - mu0) + score_alpha @ (a_inv @ d0)) / w0.mean()
    k = formula.n_terms
    return ArmMeans(mu1, mu0, pi, np.zeros(n), np.zeros(n), method="ipw", n1=data.n1,
                    n0=data.n0, p1=k, p0=k, influence1=psi1, influence0=psi0,
                    fits={"treatment_model": _fit_summary(fit)},
                    diagnostics={"weight_sum_treated": float(w1.sum()),
                                 "weight_sum_control": float(w0.sum()),
                                 "propensity_range": [float(e.min()), float(e.max())]})


def estimate(data: TrialDataset, config: EstimatorConfig) -> ArmMeans:
    """Dispatch on ``config.method`` (complete outcome data only)."""
    m = config.method
    if m is Method.UNADJUSTED:
        return estimate_unadjusted(data)
    if m is Method.STANDARDIZATION_SEPARATE:
        return estimate_standardization_separate(data, config.formula, config.link)
    if m is Method.STANDARDIZATION_POOLED:
        return estimate_standardization_pooled(data, config.formula, config.link)
    if m is Method.ANCOVA:
        return estimate_ancova(data, config.formula)
    if m is Method.ANHECOVA:
        return estimate_anhecova(data, config.formula)
    if m is Method.IPW:
        return estimate_ipw(data, config.formula)
    return estimate_aipw(data, config.formula, config.link)


def contrast(arm_means: ArmMeans, spec: EstimandSpec) -> float:
    """Difference, ratio or odds ratio of the two arm means."""
    mu1, mu0 = arm_means.mu1_hat, arm_means.mu0_hat
    scale = spec.scale if isinstance(spec, EstimandSpec) else Scale(spec)
    if scale is Scale.DIFFERENCE:
        return mu1 - mu0
    if scale is Scale.RATIO:
        if mu0 <= 0 or mu1 < 0:
            raise BoundaryEstimate(f"ratio undefined at mu0={mu0:g}", operation="contrast",
                                   hint="report the difference scale instead")
        return mu1 / mu0
    if not (0 < mu1 < 1 and 0 < mu0 < 1):
        raise BoundaryEstimate(f"odds ratio undefined at mu1={mu1:g}, mu0={mu0:g}",
                               operation="contrast", hint="report the difference scale instead")
    return (mu1 / (1 - mu1)) / (mu0 / (1 - mu0))
