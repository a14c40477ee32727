import numpy as np
import pytest

from covadj import EstimatorConfig, ModelFormula, make_dataset
from covadj.errors import (
    AllMissingColumn,
    InsufficientCompleteCases,
    InvalidConfig,
    MissingValues,
    PositivityViolation,
)
from covadj.estimators import estimate_standardization_separate
from covadj.missing import (
    CovariateStrategy,
    ImputationPlan,
    OutcomeStrategy,
    augment_formula,
    completeness_probabilities,
    dr_weighted_standardization,
    impute_covariates,
    mar_standardization,
    missingness_findings,
)
from covadj.pipeline import run_estimator
from covadj.simulation import (
    CovariateLaw,
    DGPSpec,
    Missingness,
    OutcomeModel,
    generate_trial,
    replicate_rng,
    true_estimands,
)

from conftest import random_trial

NA = np.nan
LIN = ModelFormula(("x",))
QUAD = ModelFormula(("x", "x^2"))


def _with_missing_outcomes(data, rng, rate):
    y = data.outcome.copy()
    y[rng.random(data.n) < rate] = np.nan
    return data.replace(outcome=y, outcome_missing=np.isnan(y))


# ---------------------------------------------------------------------------
# covariates

def test_mean_impute_uses_observed_mean():
    d = make_dataset([1, 0, 1, 0], [1, 1, 0, 0], {"x": [1, 2, NA, 3]})
    out = impute_covariates(d, ImputationPlan(CovariateStrategy.MEAN_IMPUTE))
    np.testing.assert_array_equal(out.column("x"), [1, 2, 2, 3])
    assert out.covariate_names == ("x",)
    assert not out.covariate_missing.any()
    rec = out.provenance[-1]
    assert rec["action"] == "mean_impute" and rec["fill_value"] == 2 and rec["n_imputed"] == 1


@pytest.mark.parametrize("strategy", [CovariateStrategy.INDICATOR_PLUS_MEAN,
                                      CovariateStrategy.MISSING_INDICATOR])
def test_indicator_strategies_append_indicator(strategy):
    d = make_dataset([1, 0, 1, 0], [1, 1, 0, 0], {"x": [1, 2, NA, 3], "w": [0, 1, 0, 1]})
    out = impute_covariates(d, ImputationPlan(strategy))
    assert out.covariate_names == ("x", "w", "x_missing")
    np.testing.assert_array_equal(out.column("x_missing"), [0, 0, 1, 0])
    np.testing.assert_array_equal(out.column("x"), [1, 2, 2, 3])


def test_mean_is_pooled_not_per_arm():
    # treated observed mean 1, control observed mean 5, pooled mean 3
    d = make_dataset([0] * 6, [1, 1, 1, 0, 0, 0], {"x": [1, 1, NA, 5, 5, NA]})
    out = impute_covariates(d, ImputationPlan())
    np.testing.assert_array_equal(out.column("x")[[2, 5]], [3, 3])


def test_imputation_ignores_outcome_and_arm(rng):
    n = 60
    x = rng.normal(size=n)
    x[rng.random(n) < 0.3] = np.nan
    y, z = rng.normal(size=n), np.tile([0, 1], n // 2)
    plan = ImputationPlan(CovariateStrategy.INDICATOR_PLUS_MEAN)
    base = impute_covariates(make_dataset(y, z, {"x": x}), plan)
    perm = rng.permutation(n)
    shuffled = impute_covariates(make_dataset(y[perm], z[perm], {"x": x}), plan)
    np.testing.assert_array_equal(base.covariates, shuffled.covariates)


def test_all_missing_column_raises():
    d = make_dataset([1, 0, 1, 0], [1, 1, 0, 0], {"x": [NA] * 4})
    with pytest.raises(AllMissingColumn):
        impute_covariates(d, ImputationPlan())


def test_exclude_column_drops_it():
    d = make_dataset([1, 0, 1, 0], [1, 1, 0, 0], {"x": [NA] * 4, "w": [0, 1, 1, 0]})
    out = impute_covariates(d, ImputationPlan(CovariateStrategy.EXCLUDE_COLUMN,
                                              exclude_columns=("x",)))
    assert out.covariate_names == ("w",)
    assert out.provenance[-1] == {"column": "x", "action": "excluded", "n_missing": 4}


def test_exclude_column_needs_names():
    with pytest.raises(InvalidConfig):
        ImputationPlan(CovariateStrategy.EXCLUDE_COLUMN)


def test_augment_formula_adds_indicator_and_drops_excluded():
    d = make_dataset([1, 0, 1, 0], [1, 1, 0, 0], {"x": [1, NA, 0, 1], "w": [0, 1, 1, 0]})
    out = impute_covariates(d, ImputationPlan(CovariateStrategy.MISSING_INDICATOR))
    assert augment_formula(ModelFormula(("x", "w")), out).terms == ("x", "w", "x_missing")
    assert augment_formula(ModelFormula(("w",)), out).terms == ("w",)
    dropped = impute_covariates(d, ImputationPlan(CovariateStrategy.EXCLUDE_COLUMN,
                                                  exclude_columns=("x",)))
    assert augment_formula(ModelFormula(("x", "w")), dropped).terms == ("w",)


def test_high_missingness_warning():
    x = [NA, NA, NA, 1, 2, 3, 4]
    d = make_dataset([0] * 7, [1, 0, 1, 0, 1, 0, 1], {"x": x, "w": [NA, 1, 2, 3, 4, 5, 6]})
    found = missingness_findings(d)
    assert [f["column"] for f in found] == ["x"]
    assert found[0]["level"] == "warning" and found[0]["code"] == "HighMissingness"
    assert found[0]["rate"] == pytest.approx(3 / 7)


# ---------------------------------------------------------------------------
# outcomes: exact reductions

def test_mar_without_missing_outcomes_is_separate_standardization(rng):
    d = random_trial(rng, n=150, p=2)
    f = ModelFormula(("x0", "x1"))
    a = mar_standardization(d, f)
    b = estimate_standardization_separate(d, f)
    assert a.mu1_hat == b.mu1_hat and a.mu0_hat == b.mu0_hat


def test_dr_without_missing_outcomes_is_separate_standardization(rng):
    d = random_trial(rng, n=150, p=2, binary=True)
    f = ModelFormula(("x0", "x1"))
    a = dr_weighted_standardization(d, f, "logit")
    b = estimate_standardization_separate(d, f, "logit")
    assert a.mu1_hat == pytest.approx(b.mu1_hat, abs=1e-8)
    assert a.mu0_hat == pytest.approx(b.mu0_hat, abs=1e-8)


@pytest.mark.parametrize("link,binary", [("identity", False), ("logit", True)])
def test_dr_with_constant_completeness_is_mar(rng, link, binary):
    d = _with_missing_outcomes(random_trial(rng, n=300, p=2, binary=binary), rng, 0.25)
    f = ModelFormula(("x0", "x1"))
    a = dr_weighted_standardization(d, f, link, ModelFormula(()))
    b = mar_standardization(d, f, link)
    assert a.mu1_hat == pytest.approx(b.mu1_hat, abs=1e-8)
    assert a.mu0_hat == pytest.approx(b.mu0_hat, abs=1e-8)


def test_mar_predicts_for_every_patient(rng):
    d = _with_missing_outcomes(random_trial(rng, n=200, p=1), rng, 0.3)
    am = mar_standardization(d, ModelFormula(("x0",)))
    rows = ~d.outcome_missing
    x = np.column_stack([np.ones(d.n), d.column("x0")])
    for arm, mu in ((1, am.mu1_hat), (0, am.mu0_hat)):
        keep = rows & (d.arm == arm)
        beta = np.linalg.lstsq(x[keep], d.outcome[keep], rcond=None)[0]
        assert mu == pytest.approx((x @ beta).mean(), abs=1e-10)
    assert am.n1 + am.n0 == rows.sum()


def test_insufficient_complete_cases():
    y = [1, NA, NA, NA, 0, 1, 0, 1]
    d = make_dataset(y, [1, 1, 1, 1, 0, 0, 0, 0], {"x": [0, 1, 2, 3, 0, 1, 2, 3]})
    with pytest.raises(InsufficientCompleteCases):
        mar_standardization(d, LIN)


# ---------------------------------------------------------------------------
# positivity

def _positivity_trial():
    spec = DGPSpec(n=400, covariates=(CovariateLaw("x", "uniform", a=-3.0, b=3.0),),
                   outcome=OutcomeModel("identity", 0.0, 1.0, {"x": 1.0}),
                   missingness=Missingness("mar", intercept=0.0, terms={"x": 3.0}))
    return generate_trial(spec, replicate_rng(3, 0)).data


def test_positivity_violation_raises():
    with pytest.raises(PositivityViolation):
        dr_weighted_standardization(_positivity_trial(), LIN, "identity", LIN)


def test_positivity_floor_clips_and_reports():
    d = _positivity_trial()
    p, diag = completeness_probabilities(d, LIN, on_violation="floor")
    assert p.min() == pytest.approx(0.01)
    assert diag["floored"] == int((p == 0.01).sum()) > 0
    am = dr_weighted_standardization(d, LIN, "identity", LIN, on_violation="floor")
    assert np.isfinite(am.mu1_hat) and np.isfinite(am.mu0_hat)


# ---------------------------------------------------------------------------
# pipeline

def test_pipeline_refuses_missing_outcomes_by_default(rng):
    d = _with_missing_outcomes(random_trial(rng, n=80, p=1), rng, 0.2)
    cfg = EstimatorConfig("standardization_separate", ModelFormula(("x0",)))
    with pytest.raises(MissingValues):
        run_estimator(d, cfg, ImputationPlan())


def test_pipeline_outcome_strategy_needs_outcome_model(rng):
    d = _with_missing_outcomes(random_trial(rng, n=80, p=1), rng, 0.2)
    plan = ImputationPlan(outcome_strategy=OutcomeStrategy.MAR_STANDARDIZATION)
    with pytest.raises(InvalidConfig):
        run_estimator(d, EstimatorConfig("unadjusted"), plan)


def test_pipeline_dr_defaults_missingness_model_to_outcome_terms(rng):
    d = _with_missing_outcomes(random_trial(rng, n=300, p=1), rng, 0.2)
    f = ModelFormula(("x0",))
    cfg = EstimatorConfig("standardization_separate", f)
    got = run_estimator(d, cfg, ImputationPlan(outcome_strategy=OutcomeStrategy.DR_WEIGHTED))
    want = dr_weighted_standardization(d, f, "identity", f)
    assert got.mu1_hat == want.mu1_hat and got.mu0_hat == want.mu0_hat
    intercept_only = ImputationPlan(outcome_strategy="dr_weighted",
                                    missingness_formula=ModelFormula(()))
    got = run_estimator(d, cfg, intercept_only)
    assert got.mu1_hat == pytest.approx(mar_standardization(d, f).mu1_hat, abs=1e-8)


def test_pipeline_imputes_covariates_before_outcome_model(rng):
    d = random_trial(rng, n=200, p=1)
    x = d.column("x0").copy()
    x[rng.random(d.n) < 0.2] = np.nan
    d = make_dataset(d.outcome, d.arm, {"x0": x})
    cfg = EstimatorConfig("standardization_separate", ModelFormula(("x0",)))
    plan = ImputationPlan(CovariateStrategy.MISSING_INDICATOR)
    am = run_estimator(d, cfg, plan)
    assert am.p1 == am.p0 == 2  # the indicator counts as a term
    filled = impute_covariates(d, plan)
    want = estimate_standardization_separate(filled, ModelFormula(("x0", "x0_missing")))
    assert am.mu1_hat == want.mu1_hat


# ---------------------------------------------------------------------------
# Monte-Carlo properties (closed-form truth as oracle)

MAR_DGP = DGPSpec(
    n=2000, pi=0.5, covariates=(CovariateLaw("x", "uniform", a=-1.0, b=2.0),),
    outcome=OutcomeModel("identity", intercept=1.0, treatment=1.0,
                         terms={"x": 1.0, "x^2": 1.5}, interactions={"x^2": 1.0}),
    missingness=Missingness("mar", intercept=-1.0, treatment=0.5, terms={"x": 1.2}))


def _mc(spec, estimator, R=300, seed=7):
    truth = true_estimands(spec)["difference"]
    est = np.array([estimator(generate_trial(spec, replicate_rng(seed, r)).data).difference
                    for r in range(R)])
    return est.mean() - truth, est.std(ddof=1) / np.sqrt(R)


def test_mar_dgp_truth_is_closed_form():
    # E(x^2) over U(-1, 2) is 1, so E(Y1) - E(Y0) = 1 + 1 * 1
    assert true_estimands(MAR_DGP)["difference"] == pytest.approx(2.0)


@pytest.mark.slow
def test_mar_mcar_correct_model_unbiased():
    spec = DGPSpec(n=2000, covariates=(CovariateLaw("x", "normal"),),
                   outcome=OutcomeModel("identity", 0.5, 1.0, {"x": 1.0}, {"x": 0.5}),
                   missingness=Missingness("mcar", rate=0.2))
    bias, se = _mc(spec, lambda d: mar_standardization(d, LIN))
    assert abs(bias) < 3 * se


@pytest.mark.slow
def test_mar_misspecified_outcome_model_is_biased():
    bias, se = _mc(MAR_DGP, lambda d: mar_standardization(d, LIN))
    assert abs(bias) > 3 * se


@pytest.mark.slow
def test_dr_wrong_outcome_model_right_missingness_model_unbiased():
    bias, se = _mc(MAR_DGP, lambda d: dr_weighted_standardization(d, LIN, "identity", LIN))
    assert abs(bias) < 3 * se


@pytest.mark.slow
def test_dr_right_outcome_model_wrong_missingness_model_unbiased():
    bias, se = _mc(MAR_DGP, lambda d: dr_weighted_standardization(d, QUAD, "identity",
                                                                  ModelFormula(())))
    assert abs(bias) < 3 * se
