"""Imputation + estimation as one re-runnable step (also what the bootstrap re-runs)."""

from __future__ import annotations

from dataclasses import replace

from .data import TrialDataset
from .errors import InvalidConfig, MissingValues
from .estimators import ArmMeans, EstimatorConfig, Method, estimate
from .missing import (
    ImputationPlan,
    OutcomeStrategy,
    augment_formula,
    dr_weighted_standardization,
    impute_covariates,
    mar_standardization,
)

_OUTCOME_MODEL_METHODS = (Method.STANDARDIZATION_SEPARATE, Method.AIPW_GENERAL)


def prepare(data: TrialDataset, config: EstimatorConfig, plan: ImputationPlan | None = None):
    """Apply the covariate part of the plan; return (data, config) ready to estimate."""
    if plan is None:
        return data, config
    if data.has_missing_covariates or plan.exclude_columns:
        data = impute_covariates(data, plan)
        formula = augment_formula(config.formula, data)
        if formula is not config.formula:
            config = replace(config, formula=formula)
    return data, config


def run_estimator(data: TrialDataset, config: EstimatorConfig,
                  plan: ImputationPlan | None = None) -> ArmMeans:
    data, config = prepare(data, config, plan)
    if not data.has_missing_outcome:
        return estimate(data, config)
    strategy = plan.outcome_strategy if plan else OutcomeStrategy.COMPLETE_CASE_ERROR
    if strategy is OutcomeStrategy.COMPLETE_CASE_ERROR:
        raise MissingValues(f"{int(data.outcome_missing.sum())} outcome value(s) missing",
                            operation="run_estimator",
                            hint="set imputation.outcome_strategy to mar_standardization "
                                 "or dr_weighted")
    if config.method not in _OUTCOME_MODEL_METHODS:
        raise InvalidConfig(f"outcome strategy {strategy.value} needs an outcome working model; "
                            f"method {config.method.value} has none",
                            operation="run_estimator",
                            hint="use method standardization_separate")
    if strategy is OutcomeStrategy.MAR_STANDARDIZATION:
        return mar_standardization(data, config.formula, config.link)
    mformula = plan.missingness_formula
    if mformula is not None:
        mformula = augment_formula(mformula, data)
    return dr_weighted_standardization(data, config.formula, config.link, mformula)
