"""Error and warning taxonomy shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration, dimensions, or argument combination."""


class ProtocolError(RuntimeError):
    """The federated protocol cannot proceed (e.g. no usable TCS reports)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class FormatError(ValueError):
    """Malformed input file (IDX, checkpoint, CSV, ...)."""


class InsufficientDataError(ValueError):
    """Too few samples to run the requested evaluation."""


class DiagnosticsWarning(UserWarning):
    """Non-fatal numerical or coverage conditions worth surfacing."""
