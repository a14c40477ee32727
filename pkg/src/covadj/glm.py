"""Canonical-link GLM fitting by iteratively reweighted least squares.

Three families are supported, each with its canonical link: Gaussian
(identity), Bernoulli (logit) and Poisson (log). Canonical links make the
score equations read ``X' W (y - mu) = 0``, so with an intercept the weighted
mean of the fitted values reproduces the weighted mean of the outcome.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit, xlogy

from .errors import DimensionMismatch, NonConvergence, RankDeficientDesign, Separation

VARIANCE_FLOOR = 1e-12
DEV_ABS_TOL = 1e-10
DEV_REL_TOL = 1e-12
MAX_HALVINGS = 20
SEPARATION_EPS = 1e-10


class Link(str, enum.Enum):
    IDENTITY = "identity"
    LOGIT = "logit"
    LOG = "log"

    @property
    def family(self) -> str:
        return {"identity": "gaussian", "logit": "bernoulli", "log": "poisson"}[self.value]

    def forward(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self is Link.IDENTITY:
            return mu
        if self is Link.LOGIT:
            return logit(mu)
        return np.log(mu)

    def inverse(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self is Link.IDENTITY:
            return eta
        if self is Link.LOGIT:
            return expit(eta)
        return np.exp(np.minimum(eta, 700.0))

    def mu_eta(self, eta):
        """d mu / d eta; for a canonical link this is also the variance function."""
        eta = np.asarray(eta, dtype=float)
        if self is Link.IDENTITY:
            return np.ones_like(eta)
        if self is Link.LOGIT:
            p = expit(eta)
            return p * (1.0 - p)
        return np.exp(np.minimum(eta, 700.0))

    def variance(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self is Link.IDENTITY:
            return np.ones_like(mu)
        if self is Link.LOGIT:
            return mu * (1.0 - mu)
        return mu

    def unit_deviance(self, y, mu):
        if self is Link.IDENTITY:
            return (y - mu) ** 2
        if self is Link.LOGIT:
            return 2.0 * (xlogy(y, y) - xlogy(y, mu) + xlogy(1 - y, 1 - y) - xlogy(1 - y, 1 - mu))
        return 2.0 * (xlogy(y, y) - xlogy(y, mu) - (y - mu))

    def start(self, y):
        if self is Link.IDENTITY:
            return y.astype(float)
        if self is Link.LOGIT:
            return (y + 0.5) / 2.0
        return y + 0.1


def as_link(value) -> Link:
    return value if isinstance(value, Link) else Link(str(value).lower())


@dataclass(frozen=True, eq=False)
class WorkingModelFit:
    link: Link
    coefficients: np.ndarray
    converged: bool
    iterations: int
    deviance: float
    n_params_excluding_intercept: int
    n_obs: int
    design_info: object = None
    deviance_history: tuple = field(default=(), repr=False)

    def linear_predictor(self, design_rows):
        design_rows = np.atleast_2d(np.asarray(design_rows, dtype=float))
        if design_rows.shape[1] != self.coefficients.shape[0]:
            raise DimensionMismatch(
                f"design has {design_rows.shape[1]} columns, fit has "
                f"{self.coefficients.shape[0]} coefficients", operation="predict_mean")
        return design_rows @ self.coefficients


def predict_mean(fit: WorkingModelFit, design_rows) -> np.ndarray:
    """Inverse link applied to the linear predictor of each row."""
    return fit.link.inverse(fit.linear_predictor(design_rows))


def _has_intercept(x):
    return bool(x.shape[0]) and any(np.all(x[:, j] == 1.0) for j in range(x.shape[1]))


def _check_rank(xw, operation):
    if xw.shape[1] == 0:
        return
    if xw.shape[0] < xw.shape[1]:
        raise RankDeficientDesign(
            f"{xw.shape[0]} observations for {xw.shape[1]} parameters", operation=operation,
            hint="use fewer working-model terms, or fall back to the unadjusted estimator")
    rank = np.linalg.matrix_rank(xw)
    if rank < xw.shape[1]:
        zero = [j for j in range(xw.shape[1]) if not np.any(xw[:, j])]
        detail = f" (all-zero column(s) {zero})" if zero else ""
        raise RankDeficientDesign(
            f"design has rank {rank} < {xw.shape[1]} columns{detail}", operation=operation,
            hint="drop collinear or constant covariates from the pre-specified formula")


def fit_glm(y, design, link="identity", weights=None, *, max_iter=100,
            formula=None) -> WorkingModelFit:
    """Maximum-likelihood fit of a canonical-link GLM.

    Parameters
    ----------
    y : array_like
        Outcome vector.
    design : array_like
        n x p design matrix (include the intercept column explicitly).
    link : Link or str
        ``identity``, ``logit`` or ``log``.
    weights : array_like, optional
        Nonnegative observation weights. Rows with zero weight do not
        contribute to the fit.
    max_iter : int
        IRLS iteration cap.
    formula : ModelFormula, optional
        Stored on the result as ``design_info``.

    Raises
    ------
    RankDeficientDesign
        The weighted design does not have full column rank.
    Separation
        Logit fit with fitted probabilities within 1e-10 of 0 or 1, or with
        coefficients beyond 1e6 in magnitude.
    NonConvergence
        No convergence within `max_iter` iterations.
    """
    link = as_link(link)
    y = np.asarray(y, dtype=float).ravel()
    x = np.asarray(design, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    if y.shape[0] != n:
        raise DimensionMismatch(f"y has {y.shape[0]} rows, design has {n}", operation="fit_glm")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.shape[0] != n:
        raise DimensionMismatch("weights length differs from y", operation="fit_glm")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be nonnegative and not all zero")
    keep = w > 0
    y, x, w = y[keep], x[keep], w[keep]
    _check_rank(x * np.sqrt(w)[:, None], "fit_glm")
    if link is Link.LOGIT and np.any((y < 0) | (y > 1)):
        raise ValueError("logit fits need outcomes in [0, 1]")
    if link is Link.LOG and np.any(y < 0):
        raise ValueError("log-link fits need nonnegative outcomes")

    if formula is not None:
        n_params = formula.n_terms
    else:
        n_params = p - 1 if _has_intercept(x) else p

    mu = link.start(y)
    eta = link.forward(mu)
    dev = float(np.sum(w * link.unit_deviance(y, mu)))
    beta = None
    history = []
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        d = link.mu_eta(eta)
        var = np.maximum(link.variance(mu), VARIANCE_FLOOR)
        d = np.where(np.abs(d) < VARIANCE_FLOOR, VARIANCE_FLOOR, d)
        z = eta + (y - mu) / d
        sw = np.sqrt(w * d * d / var)
        beta_new = np.linalg.lstsq(x * sw[:, None], z * sw, rcond=None)[0]
        eta_new = x @ beta_new
        mu_new = link.inverse(eta_new)
        dev_new = float(np.sum(w * link.unit_deviance(y, mu_new)))
        if beta is not None:
            halvings = 0
            while not (dev_new <= dev + DEV_ABS_TOL) and halvings < MAX_HALVINGS:
                beta_new = 0.5 * (beta + beta_new)
                eta_new = x @ beta_new
                mu_new = link.inverse(eta_new)
                dev_new = float(np.sum(w * link.unit_deviance(y, mu_new)))
                halvings += 1
        change = abs(dev_new - dev)
        beta, eta, mu, dev = beta_new, eta_new, mu_new, dev_new
        history.append(dev)
        if change < DEV_ABS_TOL or change < DEV_REL_TOL * abs(dev):
            converged = True
            break

    if link is Link.LOGIT:
        boundary = np.any((mu < SEPARATION_EPS) | (mu > 1 - SEPARATION_EPS))
        if boundary or np.any(np.abs(beta) > 1e6):
            raise Separation(
                "fitted probabilities reach 0 or 1: the outcome is (quasi-)separated by the "
                "working-model covariates", operation="fit_glm", coefficients=beta.copy(),
                hint="the estimator cannot extrapolate here; drop the separating covariate "
                     "or fall back to the unadjusted estimator")
    if not converged:
        raise NonConvergence(f"IRLS did not converge in {max_iter} iterations",
                             operation="fit_glm", coefficients=beta.copy(),
                             hint="fall back to the unadjusted estimator")
    return WorkingModelFit(link=link, coefficients=beta, converged=True, iterations=iterations,
                           deviance=dev, n_params_excluding_intercept=int(n_params),
                           n_obs=int(keep.sum()), design_info=formula,
                           deviance_history=tuple(history))


def score_information(fit: WorkingModelFit, y, design, weights=None):
    """Per-observation score contributions and the averaged information matrix.

    Returns ``(scores, information)`` with ``scores[i] = w_i x_i (y_i - mu_i)``
    (canonical link) over all n rows, zero-weight rows contributing zero, and
    ``information = n^-1 sum_i w_i v_i x_i x_i'``.
    """
    y = np.asarray(y, float)
    x = np.asarray(design, float)
    n = x.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, float)
    eta = x @ fit.coefficients
    mu = fit.link.inverse(eta)
    v = fit.link.mu_eta(eta)
    resid = np.where(w > 0, np.nan_to_num(y - mu), 0.0)
    scores = (w * resid)[:, None] * x
    information = (x * (w * v)[:, None]).T @ x / n
    return scores, information


def robust_covariance(fit: WorkingModelFit, y, design, weights=None) -> np.ndarray:
    """Sandwich (HC0) covariance of the coefficients."""
    scores, information = score_information(fit, y, design, weights)
    n = scores.shape[0]
    bread = np.linalg.inv(information)
    meat = scores.T @ scores / n
    return bread @ meat @ bread / n
