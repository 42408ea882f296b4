"""Exception types shared across the pipeline.

ValidationError marks problems a user can fix by changing configuration or
arguments; the CLI maps it to exit code 2. Everything else (bad files, bad
tensors, runtime failures) exits 1.
"""


class ValidationError(Exception):
    """Inconsistent or out-of-range configuration/arguments."""


class FormatError(ValueError):
    """A file on disk does not parse as the expected format."""


class ShapeError(ValueError):
    """A tensor has the wrong rank or dimensions for an operation."""


class InputError(ValueError):
    """Numerically ill-formed input (non-finite values, empty data)."""
