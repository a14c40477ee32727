"""Missing baseline covariates and missing outcomes.

Covariates are imputed from X alone (never from Y or Z) so treatment stays
independent of the imputed covariates. Missing outcomes are handled inside
standardization: working models are fit on complete cases (optionally
weighted by inverse completeness probabilities) and predictions are averaged
over every randomized patient.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data import ModelFormula, TrialDataset
from .errors import (
    AllMissingColumn,
    CovAdjError,
    InsufficientCompleteCases,
    InvalidConfig,
    PositivityViolation,
)
from .estimators import (
    ArmMeans,
    _fit_summary,
    _pi_hat,
    estimate_standardization_separate,
    fit_arm_models,
)
from .glm import Link, fit_glm, predict_mean, score_information

HIGH_MISSINGNESS = 0.40
POSITIVITY_FLOOR = 0.01


class CovariateStrategy(str, enum.Enum):
    MISSING_INDICATOR = "missing_indicator"
    MEAN_IMPUTE = "mean_impute"
    INDICATOR_PLUS_MEAN = "indicator_plus_mean"
    EXCLUDE_COLUMN = "exclude_column"


class OutcomeStrategy(str, enum.Enum):
    COMPLETE_CASE_ERROR = "complete_case_error"
    MAR_STANDARDIZATION = "mar_standardization"
    DR_WEIGHTED = "dr_weighted"


@dataclass(frozen=True)
class ImputationPlan:
    covariate_strategy: CovariateStrategy = CovariateStrategy.MEAN_IMPUTE
    outcome_strategy: OutcomeStrategy = OutcomeStrategy.COMPLETE_CASE_ERROR
    missingness_formula: ModelFormula | None = None
    exclude_columns: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "covariate_strategy", CovariateStrategy(self.covariate_strategy))
        object.__setattr__(self, "outcome_strategy", OutcomeStrategy(self.outcome_strategy))
        mf = self.missingness_formula
        if mf is not None and not isinstance(mf, ModelFormula):
            mf = ModelFormula(tuple(mf))
        object.__setattr__(self, "missingness_formula", mf)
        object.__setattr__(self, "exclude_columns", tuple(self.exclude_columns))
        if self.covariate_strategy is CovariateStrategy.EXCLUDE_COLUMN and not self.exclude_columns:
            raise InvalidConfig("exclude_column strategy needs exclude_columns",
                                operation="ImputationPlan")


def indicator_name(column: str, taken) -> str:
    name = f"{column}_missing"
    while name in taken:
        name += "_"
    return name


def impute_covariates(data: TrialDataset, plan: ImputationPlan) -> TrialDataset:
    """Fill missing covariates using only the covariate matrix.

    Mean imputation uses the pooled (both-arm) mean of the observed entries.
    The indicator strategies additionally append one 0/1 column per covariate
    that has any missing entry. A provenance record of every transformed
    column is attached to the returned dataset.
    """
    names = list(data.covariate_names)
    x = data.covariates.copy()
    mask = data.covariate_missing.copy()
    provenance = list(data.provenance)

    for col in plan.exclude_columns:
        if col not in names:
            raise InvalidConfig(f"cannot exclude unknown column {col!r}",
                                operation="impute_covariates")
        j = names.index(col)
        provenance.append({"column": col, "action": "excluded",
                           "n_missing": int(mask[:, j].sum())})
        names.pop(j)
        x = np.delete(x, j, axis=1)
        mask = np.delete(mask, j, axis=1)

    indicators = plan.covariate_strategy in (CovariateStrategy.MISSING_INDICATOR,
                                             CovariateStrategy.INDICATOR_PLUS_MEAN)
    if plan.covariate_strategy is not CovariateStrategy.EXCLUDE_COLUMN:
        new_cols, new_names = [], []
        for j, col in enumerate(list(names)):
            m = mask[:, j]
            if not m.any():
                continue
            if m.all():
                raise AllMissingColumn(f"covariate {col!r} is missing for every patient",
                                       operation="impute_covariates",
                                       hint="exclude the column")
            fill = float(x[~m, j].mean())
            x[m, j] = fill
            record = {"column": col, "action": "mean_impute", "fill_value": fill,
                      "n_imputed": int(m.sum())}
            if indicators:
                ind = indicator_name(col, names + new_names)
                new_cols.append(m.astype(float))
                new_names.append(ind)
                record["indicator"] = ind
            provenance.append(record)
            mask[:, j] = False
        if new_cols:
            x = np.column_stack([x, *new_cols])
            mask = np.column_stack([mask, np.zeros((data.n, len(new_cols)), bool)])
            names += new_names
    return data.replace(covariates=x, covariate_names=tuple(names), covariate_missing=mask,
                        provenance=tuple(provenance))


def augment_formula(formula: ModelFormula, data: TrialDataset) -> ModelFormula:
    """Append the missing-indicator columns created for columns the formula uses."""
    extra = [rec["indicator"] for rec in data.provenance
             if "indicator" in rec and rec["column"] in formula.columns
             and rec["indicator"] not in formula.terms]
    kept = [t for t in formula.terms
            if all(c in data.covariate_names for c in ModelFormula((t,)).columns)]
    if not extra and len(kept) == len(formula.terms):
        return formula
    return ModelFormula(tuple(kept) + tuple(extra), formula.include_intercept)


def missingness_findings(data: TrialDataset, threshold=HIGH_MISSINGNESS) -> list:
    findings = []
    for j, col in enumerate(data.covariate_names):
        rate = float(data.covariate_missing[:, j].mean())
        if rate > threshold:
            findings.append({
                "level": "warning", "code": "HighMissingness", "column": col, "rate": rate,
                "message": (f"covariate {col!r} is missing for {rate:.0%} of patients; "
                            "covariates with large amounts of missingness temper precision "
                            "gains and are recommended for exclusion"),
            })
    return findings


def _complete_counts(data, rows, formula):
    need = formula.n_terms + int(formula.include_intercept)
    for arm in (1, 0):
        k = int((rows & (data.arm == arm)).sum())
        if k <= need:
            raise InsufficientCompleteCases(
                f"arm {arm} has {k} complete case(s) for {need} working-model parameters",
                operation="standardization", arm=arm)


def _mestimation_influence(data, design, fit, fit_weights, mean_hat, preds):
    """Influence of mean(h(X_i)) when h is a GLM fit by weighted estimating equations."""
    y = np.where(data.outcome_missing, 0.0, data.outcome)
    scores, information = score_information(fit, y, design, fit_weights)
    slope = fit.link.mu_eta(design @ fit.coefficients)
    grad = (design * slope[:, None]).mean(axis=0)
    return preds - mean_hat + scores @ np.linalg.solve(information, grad)


def mar_standardization(data: TrialDataset, formula: ModelFormula, link="identity") -> ArmMeans:
    """Regression imputation: fit per arm on complete cases, average over everyone."""
    if not data.has_missing_outcome:
        return estimate_standardization_separate(data, formula, link)
    pi = _pi_hat(data)
    rows = ~data.outcome_missing
    _complete_counts(data, rows, formula)
    design, fits, preds = fit_arm_models(data, formula, link, rows=rows)
    mu1, mu0 = float(preds[1].mean()), float(preds[0].mean())
    infl = {}
    for arm, mu in ((1, mu1), (0, mu0)):
        w = (rows & (data.arm == arm)).astype(float)
        infl[arm] = _mestimation_influence(data, design, fits[arm], w, mu, preds[arm])
    return ArmMeans(mu1, mu0, pi, preds[1], preds[0], method="mar_standardization",
                    n1=int((rows & (data.arm == 1)).sum()), n0=int((rows & (data.arm == 0)).sum()),
                    p1=fits[1].n_params_excluding_intercept, p0=fits[0].n_params_excluding_intercept,
                    influence1=infl[1], influence0=infl[0],
                    fits={"arm1": _fit_summary(fits[1]), "arm0": _fit_summary(fits[0])},
                    diagnostics={"outcome_missing": int(data.outcome_missing.sum())})


def completeness_probabilities(data: TrialDataset, formula: ModelFormula, *,
                               floor=POSITIVITY_FLOOR, on_violation="error"):
    """Per-arm logistic model of P(outcome observed | X); returns (p, diagnostics)."""
    design = formula.design(data)
    observed = (~data.outcome_missing).astype(float)
    p = np.ones(data.n)
    diag = {"floor": floor, "floored": 0}
    for arm in (1, 0):
        in_arm = data.arm == arm
        if observed[in_arm].all():
            diag[f"arm{arm}"] = "no missing outcomes; weights fixed at 1"
            continue
        try:
            fit = fit_glm(observed, design, Link.LOGIT, weights=in_arm.astype(float),
                          formula=formula)
        except CovAdjError as exc:
            raise PositivityViolation(f"arm {arm} missingness model failed: {exc.message}",
                                      operation="dr_weighted_standardization",
                                      hint="simplify the missingness formula") from None
        p_arm = predict_mean(fit, design)
        low = in_arm & (p_arm < floor)
        if low.any():
            if on_violation == "error":
                raise PositivityViolation(
                    f"arm {arm}: {int(low.sum())} completeness probabilities below {floor}",
                    operation="dr_weighted_standardization",
                    hint="weights would explode; simplify the missingness model")
            diag["floored"] += int(low.sum())
            p_arm = np.maximum(p_arm, floor)
        p = np.where(in_arm, p_arm, p)
        diag[f"arm{arm}"] = _fit_summary(fit)
    return p, diag


def dr_weighted_standardization(data: TrialDataset, outcome_formula: ModelFormula, link="identity",
                                missingness_formula: ModelFormula | None = None, *,
                                on_violation="error") -> ArmMeans:
    """Doubly robust standardization for outcomes missing at random.

    Step 1 becomes a complete-case fit weighted by 1 / P(complete | X, Z);
    predictions are still averaged over all patients.
    """
    if not data.has_missing_outcome:
        return estimate_standardization_separate(data, outcome_formula, link)
    pi = _pi_hat(data)
    if missingness_formula is None:
        missingness_formula = outcome_formula
    rows = ~data.outcome_missing
    _complete_counts(data, rows, outcome_formula)
    p, pdiag = completeness_probabilities(data, missingness_formula, on_violation=on_violation)
    weights = 1.0 / p
    design, fits, preds = fit_arm_models(data, outcome_formula, link, rows=rows, weights=weights)
    mu1, mu0 = float(preds[1].mean()), float(preds[0].mean())
    y = np.where(rows, data.outcome, 0.0)
    z = data.arm
    r = rows.astype(float)
    psi1 = z * r * (y - preds[1]) / (pi * p) + preds[1] - mu1
    psi0 = (1 - z) * r * (y - preds[0]) / ((1 - pi) * p) + preds[0] - mu0
    return ArmMeans(mu1, mu0, pi, preds[1], preds[0], method="dr_weighted",
                    n1=int((rows & (z == 1)).sum()), n0=int((rows & (z == 0)).sum()),
                    p1=fits[1].n_params_excluding_intercept, p0=fits[0].n_params_excluding_intercept,
                    influence1=psi1, influence0=psi0,
                    fits={"arm1": _fit_summary(fits[1]), "arm0": _fit_summary(fits[0])},
                    diagnostics={"outcome_missing": int(data.outcome_missing.sum()),
                                 "missingness_model": pdiag,
                                 "weight_range": [float(weights[rows].min()),
                                                  float(weights[rows].max())]})
