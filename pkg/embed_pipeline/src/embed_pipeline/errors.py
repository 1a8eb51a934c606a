"""Error taxonomy: usage problems vs input-data problems.

The CLI maps InputError to exit 2 and everything else under
PipelineError (bad flags, unknown encoders, dim mismatches) to exit 1.
"""


class PipelineError(Exception):
    """Base class for every error this package raises on purpose."""


class EncoderError(PipelineError):
    """Unknown encoder identifier or encoder output that breaks its spec."""


class InputError(PipelineError):
    """Malformed or empty input files."""
