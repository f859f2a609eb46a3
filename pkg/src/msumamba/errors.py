"""Exception types shared across the package.

The CLI maps these onto stable exit codes: configuration/validation
problems exit 1, runtime failures exit 2, verification failures exit 3.
"""


class MSUError(Exception):
    """Base class for all package errors."""


class ConfigError(MSUError, ValueError):
    """A configuration value violates its contract."""


class ShapeError(MSUError, ValueError):
    """Tensor shapes or value ranges violate an operation's contract."""


class DataError(MSUError, ValueError):
    """A dataset file or label mask is malformed."""


class CheckpointError(MSUError, RuntimeError):
    """A checkpoint file is corrupt, truncated, or of an unsupported version."""


class EvaluationError(MSUError, RuntimeError):
    """Evaluation cannot produce a result (e.g. no present classes)."""


class VerificationError(MSUError, RuntimeError):
    """A gradient or oracle verification check failed."""
