"""Shared error taxonomy.

The CLI maps these onto exit codes: ConfigError and ContractViolation are
usage/validation failures (exit 1), DataError covers everything wrong with
input files (exit 2), NumericError covers numerical breakdown (exit 3).
"""


class NbalignError(Exception):
    """Base class for all library errors."""


class ContractViolation(NbalignError):
    """A documented precondition was broken by the caller."""


class ConfigError(NbalignError):
    """Invalid configuration value or combination."""


class DataError(NbalignError):
    """Problem with input data (parsing, format, joins, coverage)."""


class ParseError(DataError):
    """Malformed record in a text input; message names the line."""


class ValidationError(DataError):
    """Well-formed input that breaks a content rule (duplicate id, NaN, bad label)."""


class FormatError(DataError):
    """Binary file does not follow the declared layout."""


class CorruptionError(DataError):
    """Binary file is structurally valid but internally inconsistent."""


class JoinError(DataError):
    """Cross-file id resolution failed; message lists offending ids."""


class CoverageError(DataError):
    """An evaluation input is missing required entries."""


class SamplingError(DataError):
    """Candidate pool too small for the requested sample."""


class NumericError(NbalignError):
    """Non-finite value produced where a finite one is required."""


class DegenerateVectorError(NumericError):
    """Vector norm too small for a meaningful cosine."""
