"""Analysis and simulation configuration files (JSON or TOML).

Both dialects carry the same keys; see ``docs/config.md`` for the layout.
Every problem is reported as `InvalidConfig` with a dotted ``field`` path.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import ColumnSchema, EstimandSpec, ModelFormula, OutcomeKind, Scale
from .errors import CovAdjError, InvalidConfig
from .estimators import EstimatorConfig, Method
from .glm import Link
from .inference import VarianceMethod
from .missing import CovariateStrategy, ImputationPlan, OutcomeStrategy
from .simulation import CovariateLaw, DGPSpec, Missingness, OutcomeModel

DEFAULT_SEED = 20240101
DEFAULT_BOOTSTRAP = 1000


def read_config_file(path) -> dict:
    """Parse a ``.json`` or ``.toml`` file into a dict (TOML for any other suffix)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {str(path)!r}: {exc.strerror}",
                            operation="read_config_file", field="<file>") from None
    try:
        if path.suffix.lower() == ".json":
            obj = json.loads(raw.decode("utf-8"))
        else:
            obj = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise InvalidConfig(f"config {str(path)!r} does not parse: {exc}",
                            operation="read_config_file", field="<file>") from None
    if not isinstance(obj, dict):
        raise InvalidConfig("config must be a mapping at the top level",
                            operation="read_config_file", field="<root>")
    return obj


# ---------------------------------------------------------------------------
# small typed getters that know the field path

def _bad(path, message):
    return InvalidConfig(f"{path}: {message}", operation="load_config", field=path)


def _section(obj, key, path, required=False):
    value = obj.get(key)
    if value is None:
        if required:
            raise _bad(f"{path}{key}", "required section is missing")
        return {}
    if not isinstance(value, dict):
        raise _bad(f"{path}{key}", "must be a table/object")
    return value


def _get(obj, key, path, kind, default=None, required=False):
    if key not in obj or obj[key] is None:
        if required:
            raise _bad(f"{path}{key}", "required field is missing")
        return default
    value = obj[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is int and isinstance(value, bool):
        raise _bad(f"{path}{key}", "must be an integer")
    if not isinstance(value, kind):
        name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise _bad(f"{path}{key}", f"must be of type {name}, got {type(value).__name__}")
    return value


def _enum(obj, key, path, enum_type, default):
    value = _get(obj, key, path, str, default=None)
    if value is None:
        return default
    try:
        return enum_type(value)
    except ValueError:
        allowed = ", ".join(e.value for e in enum_type)
        raise _bad(f"{path}{key}", f"unknown value {value!r} (allowed: {allowed})") from None


def _strings(obj, key, path, default=()):
    value = _get(obj, key, path, (list, str), default=list(default))
    if isinstance(value, str):
        value = [value]
    if not all(isinstance(v, str) for v in value):
        raise _bad(f"{path}{key}", "must be a list of strings")
    return tuple(value)


def _unknown_keys(obj, allowed, path):
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise _bad(f"{path}{extra[0]}", f"unknown key (allowed: {', '.join(sorted(allowed))})")


# ---------------------------------------------------------------------------
# shared sections

@dataclass(frozen=True)
class InferenceSettings:
    variance_method: VarianceMethod = VarianceMethod.INFLUENCE_CORRECTED
    bootstrap_replicates: int = DEFAULT_BOOTSTRAP
    ci_level: float = 0.95
    alpha: float = 0.05


def _parse_estimand(obj):
    sec = _section(obj, "estimand", "", required=True)
    _unknown_keys(sec, ("scale", "outcome_kind"), "estimand.")
    scales = _strings(sec, "scale", "estimand.", default=("difference",))
    if not scales:
        raise _bad("estimand.scale", "at least one scale is required")
    kind = _enum(sec, "outcome_kind", "estimand.", OutcomeKind, None)
    if kind is None:
        raise _bad("estimand.outcome_kind", "required field is missing")
    specs = []
    for s in scales:
        try:
            specs.append(EstimandSpec(Scale(s), kind))
        except ValueError:
            allowed = ", ".join(e.value for e in Scale)
            raise _bad("estimand.scale", f"unknown scale {s!r} (allowed: {allowed})") from None
    if len({s.scale for s in specs}) != len(specs):
        raise _bad("estimand.scale", "scales must not repeat")
    return tuple(specs)


def _parse_estimators(obj, columns=None):
    items = obj.get("estimators")
    if not isinstance(items, list) or not items:
        raise _bad("estimators", "a non-empty list of estimators is required")
    configs, primary = [], None
    for i, item in enumerate(items):
        path = f"estimators[{i}]."
        if not isinstance(item, dict):
            raise _bad(f"estimators[{i}]", "must be a table/object")
        _unknown_keys(item, ("name", "method", "terms", "link", "intercept", "primary"), path)
        method = _enum(item, "method", path, Method, None)
        if method is None:
            raise _bad(f"{path}method", "required field is missing")
        link = _enum(item, "link", path, Link, Link.IDENTITY)
        terms = _strings(item, "terms", path)
        try:
            formula = ModelFormula(terms, _get(item, "intercept", path, bool, default=True))
        except ValueError as exc:
            raise _bad(f"{path}terms", str(exc)) from None
        if columns is not None:
            for col in formula.columns:
                if col not in columns:
                    raise _bad(f"{path}terms", f"term references {col!r}, which is not a "
                                               "covariate in schema.covariates")
        try:
            cfg = EstimatorConfig(method, formula, link, _get(item, "name", path, str, ""))
        except CovAdjError as exc:
            raise _bad(f"{path}method", exc.message) from None
        if _get(item, "primary", path, bool, default=False):
            if primary is not None:
                raise _bad(f"{path}primary", f"only one estimator may be primary "
                                             f"(already: {primary!r})")
            primary = cfg.name
        configs.append(cfg)
    names = [c.name for c in configs]
    dup = next((n for n in names if names.count(n) > 1), None)
    if dup is not None:
        raise _bad("estimators", f"estimator name {dup!r} is used twice; names must be unique")
    return tuple(configs), primary


def _parse_imputation(obj, columns=None):
    sec = _section(obj, "imputation", "")
    path = "imputation."
    _unknown_keys(sec, ("covariate_strategy", "outcome_strategy", "missingness_terms",
                        "exclude_columns"), path)
    excl = _strings(sec, "exclude_columns", path)
    mterms = _strings(sec, "missingness_terms", path) if "missingness_terms" in sec else None
    if columns is not None:
        for col in excl:
            if col not in columns:
                raise _bad(f"{path}exclude_columns", f"{col!r} is not in schema.covariates")
    try:
        mformula = None if mterms is None else ModelFormula(mterms)
    except ValueError as exc:
        raise _bad(f"{path}missingness_terms", str(exc)) from None
    if mformula is not None and columns is not None:
        for col in mformula.columns:
            if col not in columns:
                raise _bad(f"{path}missingness_terms", f"{col!r} is not in schema.covariates")
    try:
        return ImputationPlan(
            _enum(sec, "covariate_strategy", path, CovariateStrategy,
                  CovariateStrategy.EXCLUDE_COLUMN if excl else CovariateStrategy.MEAN_IMPUTE),
            _enum(sec, "outcome_strategy", path, OutcomeStrategy,
                  OutcomeStrategy.COMPLETE_CASE_ERROR),
            mformula, excl)
    except CovAdjError as exc:
        raise _bad(f"{path}exclude_columns", exc.message) from None


def _parse_inference(obj):
    sec = _section(obj, "inference", "")
    path = "inference."
    _unknown_keys(sec, ("variance_method", "bootstrap_replicates", "ci_level", "alpha"), path)
    out = InferenceSettings(
        _enum(sec, "variance_method", path, VarianceMethod, VarianceMethod.INFLUENCE_CORRECTED),
        _get(sec, "bootstrap_replicates", path, int, DEFAULT_BOOTSTRAP),
        _get(sec, "ci_level", path, float, 0.95),
        _get(sec, "alpha", path, float, 0.05))
    if not 0 < out.ci_level < 1:
        raise _bad(f"{path}ci_level", "must lie strictly between 0 and 1")
    if not 0 < out.alpha < 1:
        raise _bad(f"{path}alpha", "must lie strictly between 0 and 1")
    if out.variance_method in (VarianceMethod.BOOTSTRAP, VarianceMethod.BCA) \
            and out.bootstrap_replicates < 200:
        raise _bad(f"{path}bootstrap_replicates", "must be at least 200")
    return out


def _parse_seed(obj):
    seed = _get(obj, "seed", "", int, DEFAULT_SEED)
    if seed < 0:
        raise _bad("seed", "must be a nonnegative integer")
    return seed


def _parse_output(obj):
    sec = _section(obj, "output", "")
    _unknown_keys(sec, ("path", "csv"), "output.")
    return _get(sec, "path", "output.", str), _get(sec, "csv", "output.", str)


# ---------------------------------------------------------------------------
# analysis

@dataclass(frozen=True)
class AnalysisConfig:
    schema: ColumnSchema
    estimands: tuple
    estimators: tuple
    primary: str | None = None
    imputation: ImputationPlan = field(default_factory=ImputationPlan)
    inference: InferenceSettings = field(default_factory=InferenceSettings)
    seed: int = DEFAULT_SEED
    output: str | None = None
    csv: str | None = None


def _parse_schema(obj):
    sec = _section(obj, "schema", "", required=True)
    path = "schema."
    _unknown_keys(sec, ("outcome", "arm", "covariates", "na_sentinel", "arm_labels"), path)
    labels = sec.get("arm_labels")
    if labels is not None:
        if not isinstance(labels, dict) or sorted(labels.values()) != [0, 1]:
            raise _bad(f"{path}arm_labels", "must map exactly one label to 1 and one to 0, "
                                            'e.g. {"active" = 1, "placebo" = 0}')
    covs = _strings(sec, "covariates", path)
    if len(set(covs)) != len(covs):
        raise _bad(f"{path}covariates", "column names must be unique")
    return ColumnSchema(_get(sec, "outcome", path, str, required=True),
                        _get(sec, "arm", path, str, required=True),
                        covs, _strings(sec, "na_sentinel", path, default=("", "NA")),
                        labels)


def analysis_config_from_dict(obj: dict) -> AnalysisConfig:
    _unknown_keys(obj, ("schema", "estimand", "estimators", "imputation", "inference",
                        "seed", "output"), "")
    schema = _parse_schema(obj)
    estimands = _parse_estimand(obj)
    estimators, primary = _parse_estimators(obj, set(schema.covariates))
    out, csv_path = _parse_output(obj)
    return AnalysisConfig(schema, estimands, estimators, primary,
                          _parse_imputation(obj, set(schema.covariates)), _parse_inference(obj),
                          _parse_seed(obj), out, csv_path)


def load_analysis_config(path) -> AnalysisConfig:
    return analysis_config_from_dict(read_config_file(path))


# ---------------------------------------------------------------------------
# simulation

@dataclass(frozen=True)
class SimulationConfig:
    dgp: DGPSpec
    estimators: tuple
    estimand: EstimandSpec
    replicates: int = 1000
    seed: int = DEFAULT_SEED
    imputation: ImputationPlan | None = None
    inference: InferenceSettings = field(default_factory=InferenceSettings)
    output: str | None = None
    csv: str | None = None


def _coef_table(sec, key, path):
    value = _get(sec, key, path, dict, default={})
    for k, v in value.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise _bad(f"{path}{key}.{k}", "coefficient must be a number")
    return {k: float(v) for k, v in value.items()}


def _parse_dgp(obj):
    sec = _section(obj, "dgp", "", required=True)
    path = "dgp."
    _unknown_keys(sec, ("n", "pi", "covariates", "outcome", "missingness"), path)
    laws = []
    for i, c in enumerate(_get(sec, "covariates", path, list, default=[])):
        cpath = f"{path}covariates[{i}]."
        if not isinstance(c, dict):
            raise _bad(f"{path}covariates[{i}]", "must be a table/object")
        _unknown_keys(c, ("name", "law", "p", "a", "b", "mean", "sd"), cpath)
        params = {k: _get(c, k, cpath, float) for k in ("p", "a", "b", "mean", "sd") if k in c}
        try:
            laws.append(CovariateLaw(_get(c, "name", cpath, str, required=True),
                                     _get(c, "law", cpath, str, required=True), **params))
        except InvalidConfig as exc:
            raise _bad(f"{cpath}law", exc.message) from None
    osec = _section(sec, "outcome", path, required=True)
    opath = f"{path}outcome."
    _unknown_keys(osec, ("link", "intercept", "treatment", "terms", "interactions", "noise_sd"),
                  opath)
    args = (_enum(osec, "link", opath, Link, Link.IDENTITY),
            _get(osec, "intercept", opath, float, 0.0),
            _get(osec, "treatment", opath, float, 0.0),
            _coef_table(osec, "terms", opath),
            _coef_table(osec, "interactions", opath),
            _get(osec, "noise_sd", opath, float, 1.0))
    try:
        outcome = OutcomeModel(*args)
    except InvalidConfig as exc:
        raise _bad(f"{path}{exc.context.get('field', 'outcome')}", exc.message) from None
    if not outcome.noise_sd > 0:
        raise _bad(f"{opath}noise_sd", "must be positive")
    missingness = None
    if sec.get("missingness") is not None:
        msec = _section(sec, "missingness", path)
        mpath = f"{path}missingness."
        _unknown_keys(msec, ("kind", "rate", "intercept", "treatment", "terms"), mpath)
        args = (_get(msec, "kind", mpath, str, "mcar"),
                _get(msec, "rate", mpath, float, 0.0),
                _get(msec, "intercept", mpath, float, 0.0),
                _get(msec, "treatment", mpath, float, 0.0),
                _coef_table(msec, "terms", mpath))
        try:
            missingness = Missingness(*args)
        except InvalidConfig as exc:
            raise _bad(f"{path}{exc.context.get('field', 'missingness')}", exc.message) from None
    n = _get(sec, "n", path, int, required=True)
    pi = _get(sec, "pi", path, float, 0.5)
    try:
        return DGPSpec(n, pi, laws, outcome, missingness)
    except InvalidConfig as exc:
        raise _bad(exc.context.get("field", "dgp"), exc.message) from None


def simulation_config_from_dict(obj: dict) -> SimulationConfig:
    _unknown_keys(obj, ("dgp", "estimand", "estimators", "imputation", "inference",
                        "replicates", "seed", "output"), "")
    dgp = _parse_dgp(obj)
    estimands = _parse_estimand(obj)
    if len(estimands) != 1:
        raise _bad("estimand.scale", "a simulation targets exactly one scale")
    estimators, _ = _parse_estimators(obj, set(dgp.names))
    replicates = _get(obj, "replicates", "", int, 1000)
    if replicates < 100:
        raise _bad("replicates", "a Monte-Carlo study needs at least 100 replicates")
    plan = _parse_imputation(obj, set(dgp.names)) if obj.get("imputation") else None
    out, csv_path = _parse_output(obj)
    return SimulationConfig(dgp, estimators, estimands[0], replicates, _parse_seed(obj), plan,
                            _parse_inference(obj), out, csv_path)


def load_simulation_config(path) -> SimulationConfig:
    return simulation_config_from_dict(read_config_file(path))
