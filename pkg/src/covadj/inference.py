"""Standard errors, confidence intervals and Wald tests for arm-mean contrasts.

Ratio and odds-ratio inference is carried out on the log scale (log ratio,
difference of logits) and back-transformed, so intervals stay positive.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import EstimandSpec, Scale, TrialDataset
from .errors import (
    BoundaryEstimate,
    CovAdjError,
    ExcessiveFailures,
    InvalidConfig,
    TooFewPatients,
    ZeroStandardError,
)
from .estimators import ArmMeans, EstimatorConfig, Method, contrast
from .glm import Link
from .missing import ImputationPlan
from .pipeline import run_estimator

MAX_FAILURE_SHARE = 0.05
MIN_BOOTSTRAP_N = 10
ZERO_SE_TOLERANCE = 1e-12


class VarianceMethod(str, enum.Enum):
    INFLUENCE = "influence"
    INFLUENCE_CORRECTED = "influence_corrected"
    BOOTSTRAP = "bootstrap"
    BCA = "bca"


@dataclass(frozen=True, eq=False)
class InfluenceVector:
    values: np.ndarray
    scale: Scale = Scale.DIFFERENCE

    @property
    def variance(self) -> float:
        """Sample variance over n: the variance estimate of the contrast."""
        n = self.values.shape[0]
        return float(np.var(self.values, ddof=1) / n)


@dataclass(frozen=True)
class CorrectionInputs:
    n1: int
    n0: int
    p1: int = 0
    p0: int = 0


@dataclass
class EstimateResult:
    point: float
    scale: EstimandSpec
    se: float
    ci_low: float
    ci_high: float
    ci_level: float = 0.95
    test_statistic: float = math.nan
    p_value: float = math.nan
    variance_method: VarianceMethod = VarianceMethod.INFLUENCE
    diagnostics: dict = field(default_factory=dict)

    @property
    def null_value(self) -> float:
        return self.scale.null_value

    def to_dict(self) -> dict:
        return {
            "scale": self.scale.scale.value,
            "point": _num(self.point),
            "se": _num(self.se),
            "se_scale": inference_scale_name(self.scale.scale),
            "ci_low": _num(self.ci_low),
            "ci_high": _num(self.ci_high),
            "ci_level": self.ci_level,
            "null_value": self.null_value,
            "test_statistic": _num(self.test_statistic),
            "p_value": _num(self.p_value),
            "variance_method": self.variance_method.value,
        }


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def inference_scale_name(scale: Scale) -> str:
    return {Scale.DIFFERENCE: "difference", Scale.RATIO: "log", Scale.ODDS_RATIO: "log"}[scale]


def to_inference_scale(value, scale: Scale):
    """Map a contrast onto the scale on which Wald inference is done."""
    if scale is Scale.DIFFERENCE:
        return value
    return np.log(value)


def from_inference_scale(value, scale: Scale):
    if scale is Scale.DIFFERENCE:
        return value
    return np.exp(value)


# ---------------------------------------------------------------------------
# influence functions

def arm_influence(data: TrialDataset, arm_means: ArmMeans):
    """Per-patient influence contributions (psi1, psi0) of the two arm means.

    Unless the estimator supplied its own, these are
    ``Z/pi (Y - h1) + h1 - mu1`` and ``(1-Z)/(1-pi) (Y - h0) + h0 - mu0``.
    """
    if arm_means.influence1 is not None:
        return np.asarray(arm_means.influence1), np.asarray(arm_means.influence0)
    pi = arm_means.pi_hat
    y, z = data.outcome, data.arm
    h1, h0 = arm_means.h1_predictions, arm_means.h0_predictions
    psi1 = z / pi * (y - h1) + h1 - arm_means.mu1_hat
    psi0 = (1 - z) / (1 - pi) * (y - h0) + h0 - arm_means.mu0_hat
    return psi1, psi0


def influence_variance(data: TrialDataset, arm_means: ArmMeans, spec: EstimandSpec):
    """Influence-function (sandwich) standard error of the contrast.

    Returns ``(se, InfluenceVector)``; for ratio and odds ratio the standard
    error refers to the log scale (delta method).
    """
    psi1, psi0 = arm_influence(data, arm_means)
    mu1, mu0 = arm_means.mu1_hat, arm_means.mu0_hat
    scale = spec.scale
    if scale is Scale.DIFFERENCE:
        values = psi1 - psi0
    elif scale is Scale.RATIO:
        if mu1 <= 0 or mu0 <= 0:
            raise BoundaryEstimate("log ratio undefined at a zero arm mean",
                                   operation="influence_variance")
        values = psi1 / mu1 - psi0 / mu0
    else:
        if not (0 < mu1 < 1 and 0 < mu0 < 1):
            raise BoundaryEstimate("log odds ratio undefined at an arm mean of 0 or 1",
                                   operation="influence_variance")
        values = psi1 / (mu1 * (1 - mu1)) - psi0 / (mu0 * (1 - mu0))
    iv = InfluenceVector(np.asarray(values, float), scale)
    return math.sqrt(max(iv.variance, 0.0)), iv


def small_sample_correction(inputs: CorrectionInputs) -> float:
    """Variance inflation factor for working models fit with p_j parameters on n_j patients.

    ``[(n0-p0-1)^-1 + (n1-p1-1)^-1] / [(n0-1)^-1 + (n1-1)^-1]``
    """
    n1, n0, p1, p0 = inputs.n1, inputs.n0, inputs.p1, inputs.p0
    if n1 <= p1 + 1 or n0 <= p0 + 1:
        raise TooFewPatients(f"correction needs n_j > p_j + 1 (n1={n1}, p1={p1}, n0={n0}, p0={p0})",
                             operation="small_sample_correction")
    return (1 / (n0 - p0 - 1) + 1 / (n1 - p1 - 1)) / (1 / (n0 - 1) + 1 / (n1 - 1))


def correction_inputs(arm_means: ArmMeans) -> CorrectionInputs:
    return CorrectionInputs(arm_means.n1, arm_means.n0, arm_means.p1, arm_means.p0)


# ---------------------------------------------------------------------------
# bootstrap

@dataclass
class BootstrapResult:
    point: float
    se: float
    ci_low: float
    ci_high: float
    replicates: np.ndarray
    n_failed: int
    B: int
    method: str = "percentile"
    bias_correction: float = 0.0
    acceleration: float = 0.0
    jackknife_failed: int = 0

    @property
    def failure_share(self) -> float:
        return self.n_failed / self.B


def _fast_path_ok(data, config, plan):
    if config is None:
        return False
    if data.has_missing_outcome or data.has_missing_covariates:
        return False
    if plan is not None and plan.exclude_columns:
        return False
    m = config.method
    if m in (Method.UNADJUSTED, Method.ANCOVA, Method.ANHECOVA):
        return True
    return m in (Method.STANDARDIZATION_SEPARATE, Method.STANDARDIZATION_POOLED,
                 Method.AIPW_GENERAL) and config.link is Link.IDENTITY \
        and config.formula.include_intercept


def _batched_wls(x, y, w):
    """Weighted least squares for each row of the weight matrix `w` (B x n).

    Returns (B x p) coefficients; rows whose normal matrix is numerically
    singular are NaN.
    """
    xtwx = np.einsum("bi,ij,ik->bjk", w, x, x)
    xtwy = np.einsum("bi,ij,i->bj", w, x, y)
    eig = np.linalg.eigvalsh(xtwx)
    ok = eig[:, 0] > 1e-12 * np.maximum(eig[:, -1], 1e-300)
    beta = np.full(xtwy.shape, np.nan)
    if ok.any():
        beta[ok] = np.linalg.solve(xtwx[ok], xtwy[ok][..., None])[..., 0]
    return beta


def batched_arm_means(data: TrialDataset, config: EstimatorConfig, weights):
    """Arm means of a linear estimator for many case-weight vectors at once.

    Resampling rows with replacement is the same as refitting with the
    resample counts as case weights, and leaving one patient out is a weight
    of zero, so bootstrap and jackknife replicates of the linear estimators
    reduce to batched weighted least squares. Returns (mu1, mu0) arrays with
    NaN marking replicates whose fit would fail.
    """
    w = np.atleast_2d(np.asarray(weights, float))
    y, z = data.outcome, data.arm.astype(float)
    total = w.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        if config.method is Method.UNADJUSTED:
            w1, w0 = w * z, w * (1 - z)
            return (w1 @ y) / w1.sum(axis=1), (w0 @ y) / w0.sum(axis=1)
        terms = config.formula.term_matrix(data)
        ones = np.ones((data.n, 1))
        if config.method in (Method.ANCOVA, Method.STANDARDIZATION_POOLED):
            x = np.hstack([ones, z[:, None], terms])
            beta = _batched_wls(x, y, w)
            x1 = np.hstack([ones, ones, terms])
            x0 = np.hstack([ones, 0 * ones, terms])
            return ((w * (beta @ x1.T)).sum(axis=1) / total,
                    (w * (beta @ x0.T)).sum(axis=1) / total)
        # separate per-arm OLS; ANHECOVA is numerically the same estimator
        x = np.hstack([ones, terms]) if config.method is Method.ANHECOVA \
            else config.formula.design(data)
        out = []
        for arm_w in (w * z, w * (1 - z)):
            beta = _batched_wls(x, y, arm_w)
            out.append((w * (beta @ x.T)).sum(axis=1) / total)
        return out[0], out[1]


def _contrast_array(mu1, mu0, scale):
    with np.errstate(invalid="ignore", divide="ignore"):
        if scale is Scale.DIFFERENCE:
            return mu1 - mu0
        if scale is Scale.RATIO:
            return np.where((mu0 > 0) & (mu1 >= 0), mu1 / mu0, np.nan)
        ok = (mu1 > 0) & (mu1 < 1) & (mu0 > 0) & (mu0 < 1)
        return np.where(ok, (mu1 / (1 - mu1)) / (mu0 / (1 - mu0)), np.nan)


def _replicate_contrasts(data, config, spec, plan, index_sets=None, weights=None,
                         estimator=None, fast=True):
    """Contrast for each resample (rows of `index_sets`) or case-weight row."""
    if fast and estimator is None and _fast_path_ok(data, config, plan):
        if weights is None:
            weights = np.zeros((len(index_sets), data.n))
            rows = np.repeat(np.arange(len(index_sets)), data.n)
            np.add.at(weights, (rows, np.ravel(index_sets)), 1.0)
        out = np.empty(weights.shape[0])
        for start in range(0, weights.shape[0], 256):
            block = weights[start:start + 256]
            mu1, mu0 = batched_arm_means(data, config, block)
            out[start:start + 256] = _contrast_array(mu1, mu0, spec.scale)
        return out
    if index_sets is None:
        index_sets = [np.repeat(np.arange(data.n), np.asarray(wr, int)) for wr in weights]
    fn = estimator or (lambda d: run_estimator(d, config, plan))
    out = np.empty(len(index_sets))
    for b, idx in enumerate(index_sets):
        try:
            out[b] = contrast(fn(data.take(idx)), spec)
        except (CovAdjError, np.linalg.LinAlgError):
            out[b] = np.nan
    return out


def _check_failures(n_failed, total, what):
    if n_failed > MAX_FAILURE_SHARE * total:
        raise ExcessiveFailures(f"{n_failed} of {total} {what} fits failed (> 5%)",
                                operation="bootstrap", module="inference",
                                hint="the working model is too rich for this sample; "
                                     "simplify it or use influence-based variance")


def _bootstrap_setup(data, B, seed):
    if B < 200:
        raise InvalidConfig(f"bootstrap needs B >= 200, got {B}", operation="bootstrap")
    if data.n < MIN_BOOTSTRAP_N:
        raise TooFewPatients(f"bootstrap needs at least {MIN_BOOTSTRAP_N} patients, got {data.n}",
                             operation="bootstrap")
    rng = np.random.default_rng(seed)
    return rng.integers(0, data.n, size=(B, data.n))


def bootstrap_variance(data: TrialDataset, config: EstimatorConfig | None, spec: EstimandSpec,
                       B: int = 1000, seed: int = 0, *, level: float = 0.95,
                       plan: ImputationPlan | None = None, estimator=None,
                       fast: bool = True) -> BootstrapResult:
    """Nonparametric bootstrap over whole patient rows.

    The full pipeline (imputation, working-model fits, averaging) is re-run
    on every resample. Failed replicates are skipped and counted. The
    standard error is the s.d. of the replicate contrasts on the inference
    scale; the interval is the percentile interval.

    `estimator`, a callable ``TrialDataset -> ArmMeans``, replaces the
    configured pipeline when given.
    """
    fn = estimator or (lambda d: run_estimator(d, config, plan))
    point = contrast(fn(data), spec)
    idx = _bootstrap_setup(data, B, seed)
    reps = _replicate_contrasts(data, config, spec, plan, index_sets=idx,
                                estimator=estimator, fast=fast)
    ok = np.isfinite(reps)
    if spec.scale is not Scale.DIFFERENCE:
        ok &= reps > 0
    n_failed = int((~ok).sum())
    _check_failures(n_failed, B, "bootstrap")
    good = reps[ok]
    t = to_inference_scale(good, spec.scale)
    alpha = 1 - level
    lo, hi = np.quantile(good, [alpha / 2, 1 - alpha / 2])
    return BootstrapResult(point=point, se=float(np.std(t, ddof=1)), ci_low=float(lo),
                           ci_high=float(hi), replicates=reps, n_failed=n_failed, B=B)


def bca_from_replicates(point, replicates, jackknife, level=0.95, scale=Scale.DIFFERENCE):
    """BCa interval from bootstrap replicates and leave-one-out estimates.

    Works on the inference scale and maps the endpoints back. Returns
    ``(ci_low, ci_high, z0, acceleration)``.
    """
    t_hat = float(to_inference_scale(point, scale))
    t = np.asarray(to_inference_scale(np.asarray(replicates, float), scale))
    jk = np.asarray(to_inference_scale(np.asarray(jackknife, float), scale))
    if np.ptp(t) == 0:
        v = float(from_inference_scale(t[0], scale))
        return v, v, 0.0, 0.0
    below = (np.sum(t < t_hat) + 0.5 * np.sum(t == t_hat)) / t.size
    below = min(max(below, 0.5 / t.size), 1 - 0.5 / t.size)
    z0 = float(stats.norm.ppf(below))
    d = jk.mean() - jk
    denom = 6.0 * np.sum(d ** 2) ** 1.5
    a = float(np.sum(d ** 3) / denom) if denom > 0 else 0.0
    alpha = 1 - level
    qs = []
    for za in stats.norm.ppf([alpha / 2, 1 - alpha / 2]):
        qs.append(float(stats.norm.cdf(z0 + (z0 + za) / (1 - a * (z0 + za)))))
    lo, hi = np.quantile(t, qs)
    return (float(from_inference_scale(lo, scale)), float(from_inference_scale(hi, scale)),
            z0, a)


def jackknife_contrasts(data, config, spec, plan=None, estimator=None, fast=True):
    n = data.n
    if fast and estimator is None and _fast_path_ok(data, config, plan):
        out = np.empty(n)
        for start in range(0, n, 256):
            stop = min(start + 256, n)
            w = np.ones((stop - start, n))
            w[np.arange(stop - start), np.arange(start, stop)] = 0.0
            mu1, mu0 = batched_arm_means(data, config, w)
            out[start:stop] = _contrast_array(mu1, mu0, spec.scale)
        return out
    keep = ~np.eye(n, dtype=bool)
    return _replicate_contrasts(data, config, spec, plan,
                                index_sets=[np.flatnonzero(k) for k in keep],
                                estimator=estimator, fast=False)


def bca_interval(data: TrialDataset, config: EstimatorConfig | None, spec: EstimandSpec,
                 B: int = 1000, seed: int = 0, level: float = 0.95, *,
                 plan: ImputationPlan | None = None, estimator=None,
                 fast: bool = True) -> BootstrapResult:
    """Bias-corrected and accelerated bootstrap interval.

    Bias correction comes from the share of replicates below the point
    estimate; acceleration from the skewness of the jackknife estimates.
    """
    boot = bootstrap_variance(data, config, spec, B, seed, level=level, plan=plan,
                              estimator=estimator, fast=fast)
    jk = jackknife_contrasts(data, config, spec, plan, estimator, fast)
    ok = np.isfinite(jk)
    if spec.scale is not Scale.DIFFERENCE:
        ok &= jk > 0
    _check_failures(int((~ok).sum()), data.n, "jackknife")
    reps = boot.replicates[np.isfinite(boot.replicates) & (boot.replicates > 0
                                                          if spec.scale is not Scale.DIFFERENCE
                                                          else True)]
    lo, hi, z0, a = bca_from_replicates(boot.point, reps, jk[ok], level, spec.scale)
    boot.ci_low, boot.ci_high = lo, hi
    boot.method = "bca"
    boot.bias_correction, boot.acceleration = z0, a
    boot.jackknife_failed = int((~ok).sum())
    return boot


# ---------------------------------------------------------------------------
# tests and the end-to-end entry point

def wald_test(result: EstimateResult, null_value: float | None = None):
    """Two-sided Wald test on the inference scale; returns (statistic, p_value)."""
    null = result.null_value if null_value is None else null_value
    if not result.se > 0:
        raise ZeroStandardError("standard error is zero; the Wald statistic is undefined",
                                operation="wald_test")
    scale = result.scale.scale
    stat = (to_inference_scale(result.point, scale) - to_inference_scale(null, scale)) / result.se
    return float(stat), float(2 * stats.norm.sf(abs(stat)))


def wald_interval(point, se, scale: Scale, level=0.95):
    q = stats.norm.ppf(0.5 + level / 2)
    t = to_inference_scale(point, scale)
    return float(from_inference_scale(t - q * se, scale)), float(from_inference_scale(t + q * se, scale))


def conditional_test(arm_means: ArmMeans, level=0.95) -> dict | None:
    """Wald test of the pooled-model treatment coefficient (sandwich s.e.)."""
    cond = arm_means.conditional
    if not cond:
        return None
    b, se = cond["coefficient"], cond["se"]
    q = stats.norm.ppf(0.5 + level / 2)
    out = {"coefficient": b, "se": se, "link": cond["link"],
           "ci_low": b - q * se, "ci_high": b + q * se}
    if se > 0:
        out["test_statistic"] = b / se
        out["p_value"] = float(2 * stats.norm.sf(abs(b / se)))
    if cond["link"] in ("logit", "log"):
        out["exp_coefficient"] = math.exp(b)
    return out


def analyze(data: TrialDataset, config: EstimatorConfig, spec: EstimandSpec, *,
            variance_method="influence", B: int = 1000, seed: int = 0, level: float = 0.95,
            plan: ImputationPlan | None = None, arm_means: ArmMeans | None = None,
            fast: bool = True) -> EstimateResult:
    """Point estimate, standard error, interval and Wald test for one estimator."""
    method = VarianceMethod(variance_method)
    am = arm_means if arm_means is not None else run_estimator(data, config, plan)
    point = contrast(am, spec)
    diag = {"pi_hat": am.pi_hat, "n1": am.n1, "n0": am.n0, "p1": am.p1, "p0": am.p0,
            "mu1_hat": am.mu1_hat, "mu0_hat": am.mu0_hat}
    cond = conditional_test(am, level)
    if cond:
        diag["conditional"] = cond
    scale = spec.scale
    if method in (VarianceMethod.INFLUENCE, VarianceMethod.INFLUENCE_CORRECTED):
        se, _ = influence_variance(data, am, spec)
        factor = 1.0
        if method is VarianceMethod.INFLUENCE_CORRECTED:
            factor = small_sample_correction(correction_inputs(am))
            se *= math.sqrt(factor)
        diag["correction_factor"] = factor
        lo, hi = wald_interval(point, se, scale, level)
    else:
        if method is VarianceMethod.BOOTSTRAP:
            boot = bootstrap_variance(data, config, spec, B, seed, level=level, plan=plan,
                                      fast=fast)
        else:
            boot = bca_interval(data, config, spec, B, seed, level, plan=plan, fast=fast)
            diag["bca_bias_correction"] = boot.bias_correction
            diag["bca_acceleration"] = boot.acceleration
            diag["jackknife_failed"] = boot.jackknife_failed
        se, lo, hi = boot.se, boot.ci_low, boot.ci_high
        diag.update(bootstrap_replicates=B, bootstrap_failed=boot.n_failed,
                    bootstrap_failure_share=boot.failure_share, correction_factor=1.0)
    if se <= ZERO_SE_TOLERANCE * max(1.0, abs(am.mu1_hat), abs(am.mu0_hat)):
        se = 0.0   # round-off only: the influence values or replicates are constant
    result = EstimateResult(point=point, scale=spec, se=se, ci_low=lo, ci_high=hi,
                            ci_level=level, variance_method=method, diagnostics=diag)
    if se > 0:
        result.test_statistic, result.p_value = wald_test(result)
    else:
        diag["zero_standard_error"] = True
    return result
