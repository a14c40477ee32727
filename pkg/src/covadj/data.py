"""Trial datasets, estimand choices, working-model formulas and CSV ingestion."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    EmptyArm,
    MissingColumn,
    MissingValues,
    NonBinaryArm,
    ParseFailure,
    ScaleOutcomeMismatch,
)

DEFAULT_NA = ("", "NA")


class Scale(str, enum.Enum):
    DIFFERENCE = "difference"
    RATIO = "ratio"
    ODDS_RATIO = "odds_ratio"


class OutcomeKind(str, enum.Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"
    POSITIVE = "positive"


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Outcome, arm indicator and baseline covariates of a two-arm trial.

    Missing entries are recorded in the boolean masks; the corresponding
    numeric slots hold NaN. Arrays are read-only after construction.
    """

    outcome: np.ndarray
    arm: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple = ()
    outcome_missing: np.ndarray | None = None
    covariate_missing: np.ndarray | None = None
    provenance: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.outcome, dtype=float).ravel()
        z = np.asarray(self.arm)
        n = y.shape[0]
        if z.shape != (n,):
            raise ParseFailure(f"arm has length {z.size}, outcome has length {n}",
                               operation="TrialDataset")
        if n and not np.all(np.isin(z, (0, 1))):
            bad = np.flatnonzero(~np.isin(z, (0, 1)))[0]
            raise NonBinaryArm(f"arm value {z[bad]!r} at row {bad} is not 0/1",
                               operation="TrialDataset", row=int(bad))
        z = z.astype(np.int64)
        x = np.asarray(self.covariates, dtype=float)
        if x.size == 0:
            x = np.zeros((n, 0))
        if x.ndim == 1:
            x = x[:, None]
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if x.shape != (n, len(names)):
            raise ParseFailure(f"covariate matrix shape {x.shape} does not match "
                               f"{n} rows x {len(names)} names", operation="TrialDataset")
        if len(set(names)) != len(names):
            raise ParseFailure("covariate names must be unique", operation="TrialDataset")
        ym = np.isnan(y) if self.outcome_missing is None else np.asarray(self.outcome_missing, bool)
        xm = np.isnan(x) if self.covariate_missing is None else np.asarray(self.covariate_missing, bool)
        if ym.shape != (n,) or xm.shape != x.shape:
            raise ParseFailure("missingness masks do not match data shape",
                               operation="TrialDataset")
        y = np.where(ym, np.nan, y)
        x = np.where(xm, np.nan, x)
        if z.sum() == 0 or z.sum() == n:
            raise EmptyArm("both arms need at least one patient",
                           operation="TrialDataset", n1=int(z.sum()), n0=int(n - z.sum()))
        object.__setattr__(self, "outcome", _readonly(y))
        object.__setattr__(self, "arm", _readonly(z))
        object.__setattr__(self, "covariates", _readonly(x))
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "outcome_missing", _readonly(ym))
        object.__setattr__(self, "covariate_missing", _readonly(xm))
        object.__setattr__(self, "provenance", tuple(self.provenance))

    @property
    def n(self) -> int:
        return self.outcome.shape[0]

    @property
    def n1(self) -> int:
        return int(self.arm.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def pi_hat(self) -> float:
        return self.n1 / self.n

    @property
    def has_missing_outcome(self) -> bool:
        return bool(self.outcome_missing.any())

    @property
    def has_missing_covariates(self) -> bool:
        return bool(self.covariate_missing.any())

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise MissingColumn(f"unknown covariate column {name!r}", operation="column",
                                hint=f"available columns: {', '.join(self.covariate_names)}") from None
        return self.covariates[:, j]

    def take(self, index) -> "TrialDataset":
        """Row subset (or resample, when `index` repeats rows)."""
        index = np.asarray(index)
        return TrialDataset(self.outcome[index], self.arm[index], self.covariates[index],
                            self.covariate_names, self.outcome_missing[index],
                            self.covariate_missing[index], self.provenance)

    def replace(self, **changes) -> "TrialDataset":
        current = dict(outcome=self.outcome, arm=self.arm, covariates=self.covariates,
                       covariate_names=self.covariate_names, outcome_missing=self.outcome_missing,
                       covariate_missing=self.covariate_missing, provenance=self.provenance)
        current.update(changes)
        return TrialDataset(**current)

    def require_complete_outcome(self, operation):
        if self.has_missing_outcome:
            raise MissingValues(f"{int(self.outcome_missing.sum())} outcome value(s) missing",
                                operation=operation,
                                hint="choose an outcome strategy (mar_standardization or "
                                     "dr_weighted) in the imputation plan")

    def summary(self) -> dict:
        return {
            "n": self.n,
            "n1": self.n1,
            "n0": self.n0,
            "pi_hat": self.pi_hat,
            "outcome_missing": int(self.outcome_missing.sum()),
            "covariate_missing": {name: int(self.covariate_missing[:, j].sum())
                                  for j, name in enumerate(self.covariate_names)},
        }


@dataclass(frozen=True)
class EstimandSpec:
    scale: Scale = Scale.DIFFERENCE
    outcome_kind: OutcomeKind = OutcomeKind.CONTINUOUS

    def __post_init__(self):
        object.__setattr__(self, "scale", Scale(self.scale))
        object.__setattr__(self, "outcome_kind", OutcomeKind(self.outcome_kind))

    @property
    def null_value(self) -> float:
        return 0.0 if self.scale is Scale.DIFFERENCE else 1.0


def validate_estimand(spec: EstimandSpec, data: TrialDataset) -> EstimandSpec:
    """Check that the requested contrast suits the declared and observed outcome.

    Odds ratios need binary outcomes; ratios need nonnegative outcomes (binary
    or positive kind). The declared kind is checked against the observed values.
    """
    y = data.outcome[~data.outcome_missing]
    kind, scale = spec.outcome_kind, spec.scale
    if kind is OutcomeKind.BINARY and not np.all(np.isin(y, (0.0, 1.0))):
        bad = y[~np.isin(y, (0.0, 1.0))][0]
        raise ScaleOutcomeMismatch(f"outcome declared binary but contains {bad!r}",
                                   operation="validate_estimand")
    if kind is OutcomeKind.POSITIVE and np.any(y < 0):
        raise ScaleOutcomeMismatch(f"outcome declared positive but contains {y[y < 0][0]!r}",
                                   operation="validate_estimand")
    if scale is Scale.ODDS_RATIO:
        if kind is not OutcomeKind.BINARY or not np.all(np.isin(y, (0.0, 1.0))):
            raise ScaleOutcomeMismatch("odds_ratio requires a binary (0/1) outcome",
                                       operation="validate_estimand",
                                       hint="use the difference scale for continuous outcomes")
    if scale is Scale.RATIO:
        if kind is OutcomeKind.CONTINUOUS or np.any(y < 0):
            raise ScaleOutcomeMismatch("ratio requires a binary or positive outcome",
                                       operation="validate_estimand",
                                       hint="declare outcome_kind positive/binary, or use the "
                                            "difference scale")
    return spec


# ---------------------------------------------------------------------------
# working-model formulas

def _parse_term(term: str) -> tuple:
    term = term.strip()
    if ":" in term:
        parts = [p.strip() for p in term.split(":")]
        if len(parts) != 2 or not all(parts) or parts[0] == parts[1]:
            raise ValueError(f"bad product term {term!r}; use 'a:b' with two distinct columns")
        return ("product", parts[0], parts[1])
    if "^" in term:
        name, _, power = term.partition("^")
        if power.strip() not in ("1", "2", "3") or not name.strip():
            raise ValueError(f"bad power term {term!r}; powers are limited to 1..3")
        return ("power", name.strip(), int(power))
    if not term:
        raise ValueError("empty formula term")
    return ("power", term, 1)


def evaluate_term(term: str, lookup) -> np.ndarray:
    """Evaluate one formula term given a name -> column accessor."""
    kind, *args = _parse_term(term)
    if kind == "product":
        return lookup(args[0]) * lookup(args[1])
    return lookup(args[0]) ** args[1]


@dataclass(frozen=True)
class ModelFormula:
    """Ordered working-model terms.

    Terms are covariate names, powers ``"x^2"``/``"x^3"`` or pairwise
    products ``"x:w"``.
    """

    terms: tuple = ()
    include_intercept: bool = True

    def __post_init__(self):
        terms = tuple(self.terms)
        for t in terms:
            _parse_term(t)
        object.__setattr__(self, "terms", terms)

    @property
    def columns(self) -> tuple:
        seen = []
        for t in self.terms:
            kind, *args = _parse_term(t)
            names = args if kind == "product" else args[:1]
            seen.extend(n for n in names if n not in seen)
        return tuple(seen)

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    def check(self, data: TrialDataset):
        missing = [c for c in self.columns if c not in data.covariate_names]
        if missing:
            raise MissingColumn(f"formula references unknown column(s) {missing}",
                                operation="ModelFormula",
                                hint=f"available columns: {list(data.covariate_names)}")

    def term_matrix(self, data: TrialDataset) -> np.ndarray:
        """n x k matrix of the (non-intercept) terms."""
        self.check(data)
        used = [data.covariate_names.index(c) for c in self.columns]
        if used and data.covariate_missing[:, used].any():
            raise MissingValues("covariates used by the working model have missing entries",
                                operation="ModelFormula",
                                hint="add a covariate strategy to the imputation plan")
        if not self.terms:
            return np.zeros((data.n, 0))
        return np.column_stack([evaluate_term(t, data.column) for t in self.terms])

    def design(self, data: TrialDataset) -> np.ndarray:
        x = self.term_matrix(data)
        if self.include_intercept:
            x = np.column_stack([np.ones(data.n), x])
        return x

    def term_names(self) -> list:
        return (["(intercept)"] if self.include_intercept else []) + list(self.terms)


# ---------------------------------------------------------------------------
# CSV ingestion

@dataclass(frozen=True)
class ColumnSchema:
    """Mapping from CSV headers onto the trial roles."""

    outcome: str
    arm: str
    covariates: tuple = ()
    na_sentinel: tuple = DEFAULT_NA
    arm_labels: Mapping | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        sentinel = self.na_sentinel
        if isinstance(sentinel, str):
            sentinel = (sentinel,)
        object.__setattr__(self, "na_sentinel", tuple(sentinel))


@dataclass
class LoadDiagnostics:
    rows: int
    n1: int
    n0: int
    missing: dict = field(default_factory=dict)


def _parse_arm(raw: str, row: int, column: str, labels) -> int:
    if labels is not None:
        if raw not in labels:
            raise NonBinaryArm(f"arm label {raw!r} at row {row} is not mapped in the schema",
                               operation="load_dataset", row=row, column=column)
        value = labels[raw]
    else:
        try:
            value = float(raw)
        except ValueError:
            raise NonBinaryArm(f"arm value {raw!r} at row {row} is not 0/1",
                               operation="load_dataset", row=row, column=column,
                               hint="map labelled arms with schema.arm_labels") from None
    if value not in (0, 1):
        raise NonBinaryArm(f"arm value {raw!r} at row {row} is not 0/1",
                           operation="load_dataset", row=row, column=column)
    return int(value)


def _parse_float(raw: str, row: int, column: str, na) -> float:
    if raw.strip() in na or raw in na:
        return math.nan
    try:
        value = float(raw)
    except ValueError:
        raise ParseFailure(f"cannot parse {raw!r} as a number (row {row}, column {column!r})",
                           operation="load_dataset",
                           row=row, column=column) from None
    if math.isnan(value):
        raise ParseFailure(f"literal NaN at row {row}; use the missing-value sentinel",
                           operation="load_dataset", row=row, column=column)
    return value


def load_dataset(path, schema: ColumnSchema, *, with_diagnostics=False):
    """Read a UTF-8 CSV with a header row into a validated `TrialDataset`.

    Row numbers in error messages count data rows from 1 (header excluded).
    """
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseFailure(f"cannot open {path}: {exc.strerror}", operation="load_dataset") from None
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseFailure(f"{path} is empty", operation="load_dataset") from None
        header = [h.strip() for h in header]
        wanted = [schema.outcome, schema.arm, *schema.covariates]
        absent = [c for c in wanted if c not in header]
        if absent:
            raise MissingColumn(f"column(s) {absent} not found in {path.name}",
                                operation="load_dataset", column=absent[0],
                                hint=f"header has: {header}")
        pos = {c: header.index(c) for c in wanted}
        ys, zs, xs = [], [], []
        for row, record in enumerate(reader, start=1):
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) != len(header):
                raise ParseFailure(f"row {row} has {len(record)} fields, expected {len(header)}",
                                   operation="load_dataset", row=row)
            arm_raw = record[pos[schema.arm]].strip()
            if arm_raw in schema.na_sentinel:
                raise NonBinaryArm(f"arm missing at row {row}", operation="load_dataset",
                                   row=row, column=schema.arm)
            zs.append(_parse_arm(arm_raw, row, schema.arm, schema.arm_labels))
            ys.append(_parse_float(record[pos[schema.outcome]], row, schema.outcome,
                                   schema.na_sentinel))
            xs.append([_parse_float(record[pos[c]], row, c, schema.na_sentinel)
                       for c in schema.covariates])
    n = len(ys)
    z = np.array(zs, dtype=np.int64)
    if n == 0 or z.sum() == 0 or z.sum() == n:
        raise EmptyArm(f"{path.name}: both arms need at least one patient",
                       operation="load_dataset", n1=int(z.sum()), n0=int(n - z.sum()))
    x = np.array(xs, dtype=float).reshape(n, len(schema.covariates))
    data = TrialDataset(np.array(ys), z, x, schema.covariates)
    if with_diagnostics:
        s = data.summary()
        return data, LoadDiagnostics(rows=n, n1=s["n1"], n0=s["n0"],
                                     missing={"outcome": s["outcome_missing"],
                                              **s["covariate_missing"]})
    return data


def write_dataset(data: TrialDataset, path, *, outcome="y", arm="z", na="NA"):
    """Write a dataset as CSV using shortest round-trip decimal text."""
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow([outcome, arm, *data.covariate_names])
        for i in range(data.n):
            y = na if data.outcome_missing[i] else repr(float(data.outcome[i]))
            xs = [na if data.covariate_missing[i, j] else repr(float(data.covariates[i, j]))
                  for j in range(len(data.covariate_names))]
            writer.writerow([y, int(data.arm[i]), *xs])


def make_dataset(y: Sequence, z: Sequence, covariates: Mapping | None = None) -> TrialDataset:
    """Convenience constructor from plain sequences; NaN marks missing values."""
    covariates = dict(covariates or {})
    n = len(y)
    x = np.column_stack([np.asarray(v, float) for v in covariates.values()]) if covariates \
        else np.zeros((n, 0))
    return TrialDataset(np.asarray(y, float), np.asarray(z), x, tuple(covariates))
