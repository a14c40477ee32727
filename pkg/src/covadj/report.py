"""Analysis reports and pre-estimation validation findings.

Reports are plain dicts that serialize with ``json.dumps(..., sort_keys=True)``
into the versioned layouts under ``covadj/schemas``.
"""

from __future__ import annotations

import csv
import json
import math
from importlib import resources

import numpy as np

from . import __version__
from .config import AnalysisConfig
from .data import TrialDataset, validate_estimand
from .errors import CovAdjError, MissingValues
from .estimators import Method, _pooled_design
from .glm import _check_rank
from .inference import analyze
from .missing import OutcomeStrategy, missingness_findings
from .pipeline import prepare, run_estimator

ANALYSIS_SCHEMA = "analysis_report.v1.json"
SIMULATION_SCHEMA = "simulation_report.v1.json"
SCHEMA_VERSION = "1.0"
PARAMS_PER_PATIENT = 1 / 20


def load_schema(name: str) -> dict:
    return json.loads(resources.files("covadj").joinpath("schemas", name).read_text("utf-8"))


def dumps(report: dict) -> str:
    """Canonical JSON text: sorted keys, no NaN, trailing newline."""
    return json.dumps(_jsonable(report), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# ---------------------------------------------------------------------------
# validation

def _finding(level, code, message, **extra):
    return {"level": level, "code": code, "message": message, **extra}


def _from_error(exc: CovAdjError, **extra):
    return _finding("error", type(exc).__name__, exc.message, hint=exc.hint, **extra)


def _designs(data, cfg):
    """The design matrices (name, rows) each working model of `cfg` will be fit on."""
    rows = ~data.outcome_missing
    m = cfg.method
    if m is Method.UNADJUSTED:
        return []
    if m in (Method.STANDARDIZATION_POOLED, Method.ANCOVA):
        return [("pooled", _pooled_design(data, cfg.formula)[0][rows])]
    design = cfg.formula.design(data)
    if m is Method.IPW:
        return [("treatment model", design)]
    return [(f"arm {arm}", design[rows & (data.arm == arm)]) for arm in (1, 0)]


def parameter_findings(data: TrialDataset, name: str, n_terms: int) -> list:
    """Heuristic warning when the working model has more than n/20 terms."""
    if n_terms <= PARAMS_PER_PATIENT * data.n:
        return []
    return [_finding(
        "warning", "ManyParameters",
        f"estimator {name!r} uses {n_terms} term(s) for {data.n} patients (p/n = "
        f"{n_terms / data.n:.3f} > 1/20); asymptotic standard errors may be too small, "
        "consider the corrected variance or fewer terms",
        estimator=name, terms=n_terms)]


def collect_findings(data: TrialDataset, config: AnalysisConfig) -> list:
    """Everything that would stop or weaken the analysis, without estimating anything."""
    findings = []
    for spec in config.estimands:
        try:
            validate_estimand(spec, data)
        except CovAdjError as exc:
            findings.append(_from_error(exc, scale=spec.scale.value))
    findings += missingness_findings(data)
    if data.has_missing_outcome and \
            config.imputation.outcome_strategy is OutcomeStrategy.COMPLETE_CASE_ERROR:
        findings.append(_from_error(MissingValues(
            f"{int(data.outcome_missing.sum())} outcome value(s) missing",
            hint="set imputation.outcome_strategy to mar_standardization or dr_weighted")))
    for cfg in config.estimators:
        try:
            prepared, pcfg = prepare(data, cfg, config.imputation)
            pcfg.formula.check(prepared)
            for label, x in _designs(prepared, pcfg):
                _check_rank(x, f"{cfg.name}: {label}")
        except CovAdjError as exc:
            findings.append(_from_error(exc, estimator=cfg.name))
            continue
        findings += parameter_findings(data, cfg.name, pcfg.formula.n_terms)
    return findings


# ---------------------------------------------------------------------------
# analysis

def _estimator_entry(data, cfg, config: AnalysisConfig):
    plan = config.imputation
    inf = config.inference
    prepared, pcfg = prepare(data, cfg, plan)
    am = run_estimator(data, cfg, plan)
    estimates, diag = {}, None
    for spec in config.estimands:
        res = analyze(data, cfg, spec, variance_method=inf.variance_method,
                      B=inf.bootstrap_replicates, seed=config.seed, level=inf.ci_level,
                      plan=plan, arm_means=am)
        entry = res.to_dict()
        entry["correction_factor"] = res.diagnostics.get("correction_factor")
        for key in ("bootstrap_failed", "bca_bias_correction", "bca_acceleration"):
            if key in res.diagnostics:
                entry[key] = res.diagnostics[key]
        estimates[spec.scale.value] = entry
        diag = res.diagnostics
    out = {
        "name": cfg.name,
        "method": cfg.method.value,
        "link": cfg.link.value,
        "terms": list(pcfg.formula.terms),
        "intercept": pcfg.formula.include_intercept,
        "primary": cfg.name == config.primary,
        "estimates": estimates,
        "diagnostics": {
            "pi_hat": am.pi_hat, "n1": am.n1, "n0": am.n0, "p1": am.p1, "p0": am.p0,
            "mu1_hat": am.mu1_hat, "mu0_hat": am.mu0_hat,
            "terms_per_patient": pcfg.formula.n_terms / data.n,
            "fits": am.fits or {},
            "converged": all(f.get("converged", True) for f in (am.fits or {}).values()
                             if isinstance(f, dict)),
            "estimator": am.diagnostics or {},
            "missingness_provenance": [dict(r) for r in prepared.provenance],
        },
    }
    if diag and "conditional" in diag:
        out["conditional"] = diag["conditional"]
    return out


def build_analysis_report(data: TrialDataset, config: AnalysisConfig, *,
                          data_source: str | None = None) -> dict:
    """Run every configured estimator on every requested scale.

    Any error aborts the whole report: the caller maps it to an exit code.
    """
    for spec in config.estimands:
        validate_estimand(spec, data)
    estimators = [_estimator_entry(data, cfg, config) for cfg in config.estimators]
    findings = missingness_findings(data)
    for e in estimators:
        findings += parameter_findings(data, e["name"], len(e["terms"]))
    inf = config.inference
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "analysis_report",
        "package_version": __version__,
        "seed": config.seed,
        "data": {**data.summary(), "source": data_source},
        "estimand": {"outcome_kind": config.estimands[0].outcome_kind.value,
                     "scales": [s.scale.value for s in config.estimands]},
        "inference": {"variance_method": inf.variance_method.value,
                      "bootstrap_replicates": inf.bootstrap_replicates,
                      "ci_level": inf.ci_level},
        "imputation": {"covariate_strategy": config.imputation.covariate_strategy.value,
                       "outcome_strategy": config.imputation.outcome_strategy.value,
                       "missingness_terms": _terms_or_none(config.imputation.missingness_formula),
                       "exclude_columns": list(config.imputation.exclude_columns)},
        "primary": config.primary,
        "estimators": estimators,
        "findings": findings,
    }


def _terms_or_none(formula):
    return None if formula is None else list(formula.terms)


def write_estimates_csv(report: dict, path):
    """One row per (estimator, scale): the flat view of an analysis report."""
    cols = ["estimator", "method", "primary", "scale", "point", "se", "se_scale", "ci_low",
            "ci_high", "ci_level", "p_value", "correction_factor"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for e in report["estimators"]:
            for scale, est in e["estimates"].items():
                row = {"estimator": e["name"], "method": e["method"], "primary": e["primary"],
                       "scale": scale, **est}
                w.writerow(["" if row.get(c) is None else row.get(c) for c in cols])


def summary_text(report: dict) -> str:
    """Short human-readable table of an analysis report."""
    d = report["data"]
    lines = [f"n = {d['n']} (treated {d['n1']}, control {d['n0']}), "
             f"outcome missing {d['outcome_missing']}",
             f"variance: {report['inference']['variance_method']}, "
             f"{report['inference']['ci_level']:.0%} intervals", ""]
    header = f"{'estimator':<28}{'scale':<12}{'estimate':>11}{'se':>10}   {'interval':<22}{'p':>9}"
    lines.append(header)
    lines.append("-" * len(header))
    for e in report["estimators"]:
        name = e["name"] + (" *" if e["primary"] else "")
        for scale, est in e["estimates"].items():
            ci = f"[{_g(est['ci_low'])}, {_g(est['ci_high'])}]"
            lines.append(f"{name:<28}{scale:<12}{_g(est['point']):>11}{_g(est['se']):>10}   "
                         f"{ci:<22}{_g(est['p_value']):>9}")
            name = ""
    if report.get("primary"):
        lines.append("")
        lines.append("* primary (pre-specified) analysis")
    return "\n".join(lines)


def _g(x):
    return "NA" if x is None else f"{x:.4g}"
