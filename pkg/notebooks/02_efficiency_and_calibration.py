# %% [markdown]
# # How much does adjustment buy?
#
# For a continuous outcome and a covariate explaining a share R^2 of the
# outcome variance, adjusted estimators have about 1 - R^2 times the variance
# of the unadjusted difference in means. The trial needs that much fewer
# patients for the same precision. This script checks the claim by
# simulation. It also checks that the influence-function intervals cover at
# the nominal rate.

# %%
import math

from covadj import EstimatorConfig, ModelFormula
from covadj.simulation import CovariateLaw, DGPSpec, OutcomeModel, run_monte_carlo

X = ModelFormula(("x",))

# %% [markdown]
# Var(x) = 1, slope 1 and noise variance 7/3 give R^2 = 1 / (1 + 7/3) = 0.3.

# %%
spec = DGPSpec(n=500, pi=0.5, covariates=(CovariateLaw("x", "normal"),),
               outcome=OutcomeModel("identity", 0.5, 1.0, {"x": 1.0},
                                    noise_sd=math.sqrt(7 / 3)))
estimators = [EstimatorConfig("ancova", X, name="ancova"),
              EstimatorConfig("standardization_separate", X, name="standardization"),
              EstimatorConfig("ipw", X, name="ipw"),
              EstimatorConfig("unadjusted", name="unadjusted")]
report = run_monte_carlo(spec, estimators, R=2000, seed=2024, variance_method="influence")

# %%
print(f"{'estimator':<16}{'bias':>9}{'emp sd':>9}{'mean se':>9}{'coverage':>10}{'rel eff':>9}")
for e in report.estimators:
    print(f"{e['name']:<16}{e['bias']:>9.4f}{e['empirical_sd']:>9.4f}{e['mean_se']:>9.4f}"
          f"{e['coverage']:>10.3f}{e['relative_efficiency']:>9.3f}")

# %% [markdown]
# The three adjusted estimators share the asymptotic variance (relative
# efficiency near 0.7, a sample-size reduction near 30%). Their mean
# estimated standard errors track the empirical spread.
#
# ## A pure-noise covariate
#
# Adjusting for a covariate unrelated to the outcome costs almost nothing
# at this sample size.

# %%
noise = DGPSpec(n=200, covariates=(CovariateLaw("x", "normal"),),
                outcome=OutcomeModel("identity", 0.5, 1.0, {"x": 0.0}))
rep = run_monte_carlo(noise, [EstimatorConfig("standardization_separate", X, name="std")],
                      R=1000, seed=7)
e = rep.estimator("std")
print(f"relative efficiency {e['relative_efficiency']:.3f} "
      f"(MC error {e['mc_standard_errors']['relative_efficiency']:.3f})")
