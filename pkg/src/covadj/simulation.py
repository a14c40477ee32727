"""Simulated two-arm trials with known truth, and a Monte-Carlo study runner.

Truth is exact wherever possible: closed form for identity-link outcome
models, enumeration of the covariate support when every covariate is
Bernoulli. Otherwise a large Monte-Carlo draw is used and its error reported.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit

from .data import (
    EstimandSpec,
    ModelFormula,
    OutcomeKind,
    Scale,
    TrialDataset,
    _parse_term,
    evaluate_term,
)
from .errors import CovAdjError, ExcessiveFailures, InvalidConfig, NotEnumerable
from .estimators import EstimatorConfig, Method
from .glm import Link, as_link
from .inference import analyze
from .missing import ImputationPlan

MC_TRUTH_DRAWS = 10_000_000
MAX_FAILURE_RATE = 0.02


@dataclass(frozen=True)
class CovariateLaw:
    """Marginal law of one baseline covariate (covariates are independent)."""

    name: str
    kind: str
    p: float = 0.5
    a: float = 0.0
    b: float = 1.0
    mean: float = 0.0
    sd: float = 1.0

    def __post_init__(self):
        if self.kind not in ("bernoulli", "uniform", "normal"):
            raise InvalidConfig(f"covariate {self.name!r}: unknown law {self.kind!r}",
                                operation="DGPSpec", field=f"covariates.{self.name}.kind")
        if self.kind == "bernoulli" and not 0 <= self.p <= 1:
            raise InvalidConfig(f"covariate {self.name!r}: p must lie in [0, 1]",
                                operation="DGPSpec", field=f"covariates.{self.name}.p")
        if self.kind == "uniform" and not self.a < self.b:
            raise InvalidConfig(f"covariate {self.name!r}: need a < b",
                                operation="DGPSpec", field=f"covariates.{self.name}.a")
        if self.kind == "normal" and not self.sd > 0:
            raise InvalidConfig(f"covariate {self.name!r}: sd must be positive",
                                operation="DGPSpec", field=f"covariates.{self.name}.sd")

    def draw(self, rng, n):
        if self.kind == "bernoulli":
            return (rng.random(n) < self.p).astype(float)
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, n)
        return rng.normal(self.mean, self.sd, n)

    def moment(self, k: int) -> float:
        if self.kind == "bernoulli":
            return self.p
        if self.kind == "uniform":
            a, b = self.a, self.b
            return (b ** (k + 1) - a ** (k + 1)) / ((k + 1) * (b - a))
        m, s = self.mean, self.sd
        return {1: m, 2: m * m + s * s, 3: m ** 3 + 3 * m * s * s}[k]


@dataclass(frozen=True)
class OutcomeModel:
    """Linear predictor ``intercept + treatment*z + sum(terms) + z*sum(interactions)``.

    Terms use the working-model formula syntax. Identity link adds Gaussian
    noise, logit draws Bernoulli outcomes, log draws Poisson counts.
    """

    link: Link = Link.IDENTITY
    intercept: float = 0.0
    treatment: float = 0.0
    terms: tuple = ()
    interactions: tuple = ()
    noise_sd: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "link", as_link(self.link))
        for attr in ("terms", "interactions"):
            value = getattr(self, attr)
            if isinstance(value, dict):
                value = tuple(value.items())
            value = tuple((str(t), float(c)) for t, c in value)
            for t, _ in value:
                try:
                    _parse_term(t)
                except ValueError as exc:
                    raise InvalidConfig(str(exc), operation="DGPSpec",
                                        field=f"outcome.{attr}") from None
            object.__setattr__(self, attr, value)

    def linear_predictor(self, lookup, z):
        eta = self.intercept + self.treatment * z
        for t, c in self.terms:
            eta = eta + c * evaluate_term(t, lookup)
        for t, c in self.interactions:
            eta = eta + z * c * evaluate_term(t, lookup)
        return eta


@dataclass(frozen=True)
class Missingness:
    """Outcome missingness: ``mcar`` with a fixed rate, or ``mar`` with
    logit P(missing) = intercept + treatment*z + sum(terms)."""

    kind: str = "mcar"
    rate: float = 0.0
    intercept: float = 0.0
    treatment: float = 0.0
    terms: tuple = ()

    def __post_init__(self):
        if self.kind not in ("mcar", "mar"):
            raise InvalidConfig(f"unknown missingness kind {self.kind!r}", operation="DGPSpec",
                                field="missingness.kind")
        if self.kind == "mcar" and not 0 <= self.rate < 1:
            raise InvalidConfig("missingness rate must lie in [0, 1)", operation="DGPSpec",
                                field="missingness.rate")
        terms = self.terms
        if isinstance(terms, dict):
            terms = tuple(terms.items())
        object.__setattr__(self, "terms", tuple((str(t), float(c)) for t, c in terms))

    def probability(self, lookup, z):
        if self.kind == "mcar":
            return np.full(np.shape(z), self.rate)
        eta = self.intercept + self.treatment * z
        for t, c in self.terms:
            eta = eta + c * evaluate_term(t, lookup)
        return expit(eta)


@dataclass(frozen=True)
class DGPSpec:
    n: int
    pi: float = 0.5
    covariates: tuple = ()
    outcome: OutcomeModel = field(default_factory=OutcomeModel)
    missingness: Missingness | None = None

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or self.n < 4:
            raise InvalidConfig(f"n must be an integer >= 4, got {self.n!r}", operation="DGPSpec",
                                field="dgp.n")
        if not 0 < self.pi < 1:
            raise InvalidConfig(f"pi must lie strictly between 0 and 1, got {self.pi!r}",
                                operation="DGPSpec", field="dgp.pi")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        names = [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise InvalidConfig("covariate names must be unique", operation="DGPSpec",
                                field="dgp.covariates")
        referenced = list(self.outcome.terms) + list(self.outcome.interactions)
        if self.missingness is not None:
            referenced += list(self.missingness.terms)
        for t, _ in referenced:
            for col in ModelFormula((t,)).columns:
                if col not in names:
                    raise InvalidConfig(f"term {t!r} references unknown covariate {col!r}",
                                        operation="DGPSpec", field="dgp.outcome.terms")

    @property
    def names(self):
        return tuple(c.name for c in self.covariates)

    @property
    def enumerable(self) -> bool:
        return all(c.kind == "bernoulli" for c in self.covariates) and len(self.covariates) <= 20


@dataclass
class Trial:
    data: TrialDataset
    y0: np.ndarray
    y1: np.ndarray


def _outcome_draw(model: OutcomeModel, eta, u, rng):
    if model.link is Link.IDENTITY:
        return eta + model.noise_sd * u
    if model.link is Link.LOGIT:
        return (u < expit(eta)).astype(float)
    return rng.poisson(np.exp(eta)).astype(float)


def generate_trial(spec: DGPSpec, rng) -> Trial:
    """Draw one trial with simple randomization and both potential outcomes.

    The observed outcome is ``Z*Y1 + (1-Z)*Y0``; missing outcomes (if the DGP
    has a missingness mechanism) are masked after that.
    """
    n = spec.n
    cols = {c.name: c.draw(rng, n) for c in spec.covariates}
    z = (rng.random(n) < spec.pi).astype(np.int64)
    model = spec.outcome
    eta1 = model.linear_predictor(cols.__getitem__, 1.0)
    eta0 = model.linear_predictor(cols.__getitem__, 0.0)
    if model.link is Link.IDENTITY:
        u = rng.standard_normal(n)
    elif model.link is Link.LOGIT:
        u = rng.random(n)
    else:
        u = None
    y1 = _outcome_draw(model, eta1 * np.ones(n), u, rng)
    y0 = _outcome_draw(model, eta0 * np.ones(n), u, rng)
    y = np.where(z == 1, y1, y0)
    missing = np.zeros(n, bool)
    if spec.missingness is not None:
        prob = spec.missingness.probability(cols.__getitem__, z.astype(float))
        missing = rng.random(n) < prob
    x = np.column_stack([cols[k] for k in spec.names]) if spec.covariates else np.zeros((n, 0))
    data = TrialDataset(np.where(missing, np.nan, y), z, x, spec.names, missing)
    return Trial(data, y0, y1)


def _contrasts(mu1, mu0):
    out = {"mu1": mu1, "mu0": mu0, "difference": mu1 - mu0}
    out["ratio"] = mu1 / mu0 if mu0 > 0 and mu1 >= 0 else None
    out["odds_ratio"] = ((mu1 / (1 - mu1)) / (mu0 / (1 - mu0))
                         if 0 < mu1 < 1 and 0 < mu0 < 1 else None)
    return out


def _term_expectation(term, laws):
    kind, *args = _parse_term(term)
    if kind == "product":
        return laws[args[0]].moment(1) * laws[args[1]].moment(1)
    return laws[args[0]].moment(args[1])


def true_estimands(spec: DGPSpec, *, allow_monte_carlo=True, draws=MC_TRUTH_DRAWS,
                   seed=12345) -> dict:
    """True E(Y^1), E(Y^0) and their contrasts.

    Identity link: closed form from covariate moments. All-Bernoulli
    covariates: exact sum over the finite support. Anything else raises
    `NotEnumerable` unless `allow_monte_carlo`, in which case `draws`
    covariate vectors are averaged and the Monte-Carlo error is reported.
    """
    model = spec.outcome
    conditional = {"treatment_coefficient": model.treatment,
                   "interactions": dict(model.interactions)}
    if model.link is Link.LOGIT and not model.interactions:
        conditional["conditional_odds_ratio"] = math.exp(model.treatment)
    if model.link is Link.LOG and not model.interactions:
        conditional["conditional_ratio"] = math.exp(model.treatment)
    laws = {c.name: c for c in spec.covariates}

    if model.link is Link.IDENTITY:
        base = model.intercept + sum(c * _term_expectation(t, laws) for t, c in model.terms)
        shift = model.treatment + sum(c * _term_expectation(t, laws) for t, c in model.interactions)
        out = _contrasts(base + shift, base)
        out.update(method="closed_form", mc_error=None, conditional=conditional)
        return out

    if spec.enumerable:
        mu1 = mu0 = 0.0
        for cell in itertools.product((0.0, 1.0), repeat=len(spec.covariates)):
            prob = 1.0
            for law, v in zip(spec.covariates, cell):
                prob *= law.p if v == 1.0 else 1 - law.p
            if prob == 0:
                continue
            lookup = dict(zip(spec.names, cell)).__getitem__
            mu1 += prob * float(model.link.inverse(model.linear_predictor(lookup, 1.0)))
            mu0 += prob * float(model.link.inverse(model.linear_predictor(lookup, 0.0)))
        out = _contrasts(mu1, mu0)
        out.update(method="enumeration", mc_error=None, conditional=conditional)
        return out

    if not allow_monte_carlo:
        raise NotEnumerable("continuous covariates with a nonlinear link: no exact truth",
                            operation="true_estimands",
                            hint="allow the Monte-Carlo truth or use Bernoulli covariates")
    rng = np.random.default_rng(seed)
    chunk = 1_000_000
    s1 = s0 = sd = ss1 = ss0 = 0.0
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        cols = {c.name: c.draw(rng, m) for c in spec.covariates}
        m1 = model.link.inverse(model.linear_predictor(cols.__getitem__, 1.0) * np.ones(m))
        m0 = model.link.inverse(model.linear_predictor(cols.__getitem__, 0.0) * np.ones(m))
        s1 += m1.sum()
        s0 += m0.sum()
        ss1 += (m1 ** 2).sum()
        ss0 += (m0 ** 2).sum()
        sd += ((m1 - m0) ** 2).sum()
        done += m
    mu1, mu0 = s1 / draws, s0 / draws
    out = _contrasts(mu1, mu0)
    out.update(method="monte_carlo", conditional=conditional, draws=draws,
               mc_error={"mu1": math.sqrt(max(ss1 / draws - mu1 ** 2, 0) / draws),
                         "mu0": math.sqrt(max(ss0 / draws - mu0 ** 2, 0) / draws),
                         "difference": math.sqrt(max(sd / draws - (mu1 - mu0) ** 2, 0) / draws)})
    return out


# ---------------------------------------------------------------------------
# Monte-Carlo engine

_FIELDS = ("point", "se", "ci_low", "ci_high", "p_value", "cond_coef", "cond_se", "cond_p",
           "failed")


def replicate_rng(seed, r, stream=0):
    """Independent, reproducible stream for replicate `r` of a study seeded by `seed`."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r, stream)))


def _run_replicate(spec, configs, estimand, r, seed, variance_method, B, level, plan,
                   full_data_index=None):
    trial = generate_trial(spec, replicate_rng(seed, r))
    row = np.full((len(configs), len(_FIELDS)), np.nan)
    errors = []
    for k, cfg in enumerate(configs):
        data = trial.data
        if k == full_data_index and data.has_missing_outcome:
            full = np.where(data.arm == 1, trial.y1, trial.y0)
            data = data.replace(outcome=full, outcome_missing=np.zeros(data.n, bool))
        try:
            res = analyze(data, cfg, estimand, variance_method=variance_method, B=B,
                          seed=np.random.SeedSequence(seed, spawn_key=(r, 1, k)), level=level,
                          plan=plan)
        except (CovAdjError, np.linalg.LinAlgError) as exc:
            row[k, -1] = 1.0
            errors.append((k, type(exc).__name__))
            continue
        row[k, :5] = (res.point, res.se, res.ci_low, res.ci_high, res.p_value)
        row[k, -1] = 0.0
        cond = res.diagnostics.get("conditional")
        if cond:
            row[k, 5:8] = (cond["coefficient"], cond["se"], cond.get("p_value", np.nan))
    return row, errors


def _se_of_variance_ratio(a, b):
    """Delta-method MC standard error of var(a) / var(b) (paired replicates)."""
    va, vb = np.var(a, ddof=1), np.var(b, ddof=1)
    if vb <= 0:
        return None
    ia = (a - a.mean()) ** 2 - va
    ib = (b - b.mean()) ** 2 - vb
    ratio = va / vb
    infl = (ia - ratio * ib) / vb
    return float(np.std(infl, ddof=1) / math.sqrt(a.size))


def _prop(x):
    p = float(np.mean(x))
    return p, math.sqrt(p * (1 - p) / x.size)


def _decision(p, stat_sign, alpha):
    return np.where(p < alpha, np.sign(stat_sign), 0.0)


@dataclass
class MonteCarloReport:
    replicates: int
    seed: int
    truth: dict
    estimators: list
    estimand: dict
    dgp: dict
    settings: dict
    per_replicate: np.ndarray | None = field(default=None, repr=False)
    names: tuple = ()

    def to_dict(self) -> dict:
        return {
            "schema_version": "1.0",
            "kind": "monte_carlo_report",
            "replicates": self.replicates,
            "seed": self.seed,
            "truth": self.truth,
            "estimand": self.estimand,
            "dgp": self.dgp,
            "settings": self.settings,
            "estimators": self.estimators,
        }

    def estimator(self, name) -> dict:
        for e in self.estimators:
            if e["name"] == name:
                return e
        raise KeyError(name)

    def write_csv(self, path):
        """Per-replicate estimates, one row per (replicate, estimator)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["replicate", "estimator", *_FIELDS])
            for r in range(self.per_replicate.shape[0]):
                for k, name in enumerate(self.names):
                    w.writerow([r, name, *[_fmt(v) for v in self.per_replicate[r, k]]])


def _fmt(v):
    return "" if not np.isfinite(v) else repr(float(v))


def _f(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _summarise(name, cfg, rows, ref_rows, truth_value, null_value, alpha, estimand):
    ok = rows[:, -1] == 0
    R = rows.shape[0]
    est = rows[ok, 0]
    se = rows[ok, 1]
    out = {"name": name, "method": cfg.method.value, "link": cfg.link.value,
           "formula": list(cfg.formula.terms), "n_ok": int(ok.sum()),
           "n_failed": int(R - ok.sum()), "failure_rate": float(1 - ok.mean())}
    mcse = {}
    if est.size >= 2:
        m, s = float(est.mean()), float(est.std(ddof=1))
        out.update(mean=m, empirical_sd=s, mean_se=_f(np.nanmean(se)))
        mcse.update(mean=s / math.sqrt(est.size), empirical_sd=s / math.sqrt(2 * (est.size - 1)),
                    mean_se=_f(np.nanstd(se, ddof=1) / math.sqrt(est.size)))
        if truth_value is not None:
            out["bias"] = m - truth_value
            mcse["bias"] = mcse["mean"]
            cover = (rows[ok, 2] <= truth_value) & (truth_value <= rows[ok, 3])
            out["coverage"], mcse["coverage"] = _prop(cover)
        pv = rows[ok, 4]
        valid = np.isfinite(pv)
        if valid.any():
            out["rejection_rate"], mcse["rejection_rate"] = _prop(pv[valid] < alpha)
        both = ok & (ref_rows[:, -1] == 0)
        a, b = rows[both, 0], ref_rows[both, 0]
        if estimand.scale is not Scale.DIFFERENCE:
            a, b = np.log(a), np.log(b)
        if both.sum() >= 3 and np.var(b) > 0:
            re = float(np.var(a, ddof=1) / np.var(b, ddof=1))
            out["relative_efficiency"] = re
            out["sample_size_reduction"] = 1 - re
            se_re = _se_of_variance_ratio(a, b)
            mcse["relative_efficiency"] = se_re
            mcse["sample_size_reduction"] = se_re
    cond_ok = ok & np.isfinite(rows[:, 5])
    if cond_ok.any():
        c = rows[cond_ok, 5]
        cond = {"mean_coefficient": float(c.mean()),
                "empirical_sd": float(c.std(ddof=1)) if c.size > 1 else None,
                "mean_se": float(rows[cond_ok, 6].mean())}
        cmc = {"mean_coefficient": float(c.std(ddof=1) / math.sqrt(c.size)) if c.size > 1 else None}
        if cfg.link in (Link.LOGIT, Link.LOG):
            e = np.exp(c)
            cond["mean_exp_coefficient"] = float(e.mean())
            cmc["mean_exp_coefficient"] = float(e.std(ddof=1) / math.sqrt(e.size)) if e.size > 1 else None
        cp = rows[cond_ok, 7]
        if np.isfinite(cp).all():
            cond["rejection_rate"], cmc["rejection_rate"] = _prop(cp < alpha)
            marg = rows[cond_ok, 4]
            marg_dir = _decision(marg, rows[cond_ok, 0] - null_value, alpha)
            cond_dir = _decision(cp, c, alpha)
            cond["directional_agreement"], cmc["directional_agreement"] = _prop(marg_dir == cond_dir)
        cond["mc_standard_errors"] = cmc
        out["conditional"] = cond
    out["mc_standard_errors"] = mcse
    return out


def run_monte_carlo(spec: DGPSpec, configs, R: int, seed: int = 0, *,
                    estimand: EstimandSpec | None = None, variance_method="influence",
                    B: int = 1000, level: float = 0.95, alpha: float = 0.05,
                    plan: ImputationPlan | None = None, jobs: int = 1,
                    keep_replicates: bool = False, truth: dict | None = None,
                    check_failures: bool = True) -> MonteCarloReport:
    """Simulate `R` trials from `spec` and run every estimator on each.

    An unadjusted estimator is added as the efficiency reference when the
    list has none. If the DGP masks outcomes, that reference is computed on
    the outcomes before masking. Replicate ``r`` draws from its own stream
    keyed by ``(seed, r)``, so results do not depend on `jobs`.

    Raises
    ------
    ExcessiveFailures
        Some estimator failed on more than 2% of the replicates.
    """
    if R < 100:
        raise InvalidConfig(f"a Monte-Carlo study needs R >= 100 replicates, got {R}",
                            operation="run_monte_carlo", field="replicates")
    if estimand is None:
        kind = {Link.IDENTITY: OutcomeKind.CONTINUOUS, Link.LOGIT: OutcomeKind.BINARY,
                Link.LOG: OutcomeKind.POSITIVE}[spec.outcome.link]
        estimand = EstimandSpec(Scale.DIFFERENCE, kind)
    configs = [c if isinstance(c, EstimatorConfig) else EstimatorConfig(**c) for c in configs]
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise InvalidConfig("estimator names must be unique", operation="run_monte_carlo")
    ref_index = next((k for k, c in enumerate(configs) if c.method is Method.UNADJUSTED), None)
    full_data_index = None
    if ref_index is None:
        # with outcome missingness the added reference sees the outcomes before masking
        if spec.missingness is None:
            configs.append(EstimatorConfig(Method.UNADJUSTED, name="unadjusted (reference)"))
        else:
            configs.append(EstimatorConfig(Method.UNADJUSTED,
                                           name="unadjusted, full data (reference)"))
            full_data_index = len(configs) - 1
        ref_index = len(configs) - 1
    if truth is None:
        truth = true_estimands(spec)

    def task(r):
        return (spec, configs, estimand, r, seed, variance_method, B, level, plan,
                full_data_index)

    if jobs == 1:
        results = [_run_replicate(*task(r)) for r in range(R)]
    else:
        results = Parallel(n_jobs=jobs)(delayed(_run_replicate)(*task(r)) for r in range(R))
    rows = np.stack([res[0] for res in results])
    failures = {}
    for _, errs in results:
        for k, name in errs:
            failures.setdefault(configs[k].name, {}).setdefault(name, 0)
            failures[configs[k].name][name] += 1

    truth_value = truth.get(estimand.scale.value)
    summaries = []
    for k, cfg in enumerate(configs):
        s = _summarise(cfg.name, cfg, rows[:, k], rows[:, ref_index], truth_value,
                       estimand.null_value, alpha, estimand)
        s["reference"] = k == ref_index
        s["failures"] = dict(sorted(failures.get(cfg.name, {}).items()))
        summaries.append(s)
    report = MonteCarloReport(
        replicates=R, seed=seed, truth=_clean(truth), estimators=summaries,
        estimand={"scale": estimand.scale.value, "outcome_kind": estimand.outcome_kind.value},
        dgp=dgp_to_dict(spec),
        settings={"variance_method": str(getattr(variance_method, "value", variance_method)),
                  "bootstrap_replicates": B, "ci_level": level, "alpha": alpha},
        per_replicate=rows if keep_replicates else None, names=tuple(c.name for c in configs))
    if check_failures:
        bad = [s for s in summaries if s["failure_rate"] > MAX_FAILURE_RATE]
        if bad:
            raise ExcessiveFailures(
                f"estimator {bad[0]['name']!r} failed on {bad[0]['failure_rate']:.1%} of "
                f"replicates (limit 2%)", operation="run_monte_carlo", module="simulation",
                failures=str(bad[0]["failures"]))
    return report


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return _f(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dgp_to_dict(spec: DGPSpec) -> dict:
    out = {
        "n": int(spec.n), "pi": spec.pi,
        "covariates": [{k: v for k, v in vars(c).items()
                        if k in ("name", "kind") or _law_param(c.kind, k)} for c in spec.covariates],
        "outcome": {"link": spec.outcome.link.value, "intercept": spec.outcome.intercept,
                    "treatment": spec.outcome.treatment, "terms": dict(spec.outcome.terms),
                    "interactions": dict(spec.outcome.interactions),
                    "noise_sd": spec.outcome.noise_sd},
    }
    if spec.missingness is not None:
        m = spec.missingness
        out["missingness"] = {"kind": m.kind, "rate": m.rate, "intercept": m.intercept,
                              "treatment": m.treatment, "terms": dict(m.terms)}
    return out


def _law_param(kind, key):
    return key in {"bernoulli": ("p",), "uniform": ("a", "b"), "normal": ("mean", "sd")}[kind]

