"""Exception hierarchy.

Every error carries a short machine-readable ``code`` and the CLI exit status
it maps to (2 usage/validation, 3 data, 4 numeric).
"""


class TailmixError(Exception):
    code = "E_TAILMIX"
    exit_code = 3


class ValidationError(TailmixError, ValueError):
    code = "E_VALIDATION"
    exit_code = 2


class DataError(TailmixError):
    code = "E_DATA"
    exit_code = 3


class NumericError(TailmixError, ArithmeticError):
    code = "E_NUMERIC"
    exit_code = 4


# mixture
class TooFewPoints(DataError):
    code = "E_TOO_FEW_POINTS"


class NonSPD(NumericError):
    code = "E_NON_SPD"


class InvalidDof(ValidationError):
    code = "E_INVALID_DOF"


# metric / eval
class NotNormalized(NumericError):
    code = "E_NOT_NORMALIZED"


class EmptyTestSplit(DataError):
    code = "E_EMPTY_TEST_SPLIT"


# trainer
class NonFiniteGradient(NumericError):
    code = "E_NON_FINITE_GRADIENT"


# data
class SeparationUnsatisfiable(ValidationError):
    code = "E_SEPARATION_UNSATISFIABLE"


class UnknownLabel(DataError):
    code = "E_UNKNOWN_LABEL"


class DuplicateId(DataError):
    code = "E_DUPLICATE_ID"


class MalformedLine(DataError):
    code = "E_MALFORMED_LINE"

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class BadMagic(DataError):
    code = "E_BAD_MAGIC"


class TruncatedFile(DataError):
    code = "E_TRUNCATED_FILE"


class CountMismatch(DataError):
    code = "E_COUNT_MISMATCH"
