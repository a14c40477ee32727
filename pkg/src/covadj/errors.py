"""Exception hierarchy.

Every error carries the module and operation that raised it plus a remedy
hint, so the command-line layer can emit a structured payload. The four
top-level families map onto the CLI exit codes.
"""


class CovAdjError(Exception):
    """Base class for all package errors."""

    exit_code = 3
    module = "covadj"

    def __init__(self, message, *, operation=None, hint=None, module=None, **context):
        super().__init__(message)
        if module is not None:
            self.module = module
        self.message = message
        self.operation = operation
        self.hint = hint
        self.context = context

    def to_dict(self):
        payload = {
            "error": type(self).__name__,
            "message": self.message,
            "module": self.module,
            "operation": self.operation,
            "hint": self.hint,
        }
        if self.context:
            payload["context"] = {k: _jsonable(v) for k, v in self.context.items()}
        return payload


def _jsonable(value):
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return str(value)


class ConfigError(CovAdjError):
    exit_code = 1
    module = "config"


class DataError(CovAdjError):
    exit_code = 2
    module = "data_model"


class EstimationError(CovAdjError):
    exit_code = 3
    module = "estimators"


class InferenceError(CovAdjError):
    exit_code = 4
    module = "inference"


# configuration ---------------------------------------------------------------

class InvalidConfig(ConfigError):
    pass


class ScaleOutcomeMismatch(ConfigError):
    module = "data_model"


class NotEnumerable(ConfigError):
    module = "simulation"


# data ------------------------------------------------------------------------

class MissingColumn(DataError):
    pass


class NonBinaryArm(DataError):
    pass


class EmptyArm(DataError):
    pass


class ParseFailure(DataError):
    pass


class MissingValues(DataError):
    """Missing entries reached a step that requires complete data."""


class AllMissingColumn(DataError):
    module = "missing_data"


# estimation ------------------------------------------------------------------

class RankDeficientDesign(EstimationError):
    module = "glm_engine"


class Separation(EstimationError):
    module = "glm_engine"

    def __init__(self, message, *, coefficients=None, **kwargs):
        super().__init__(message, **kwargs)
        self.coefficients = coefficients


class NonConvergence(EstimationError):
    module = "glm_engine"

    def __init__(self, message, *, coefficients=None, **kwargs):
        super().__init__(message, **kwargs)
        self.coefficients = coefficients


class DimensionMismatch(EstimationError):
    module = "glm_engine"


class DegenerateRandomization(EstimationError):
    pass


class BoundaryEstimate(EstimationError):
    pass


class PositivityViolation(EstimationError):
    module = "missing_data"


class InsufficientCompleteCases(EstimationError):
    module = "missing_data"


class ExcessiveFailures(EstimationError):
    """Too many replicate fits failed (bootstrap, jackknife or Monte Carlo)."""


# inference -------------------------------------------------------------------

class TooFewPatients(InferenceError):
    pass


class ZeroStandardError(InferenceError):
    pass
