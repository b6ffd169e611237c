"""Exception hierarchy shared by every kerhrm module."""


class KerHRMError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(KerHRMError, ValueError):
    """Invalid hyperparameter or configuration value."""


class InputShapeError(KerHRMError, ValueError):
    """Array shape does not match what the operation expects."""


class NumericError(KerHRMError, ArithmeticError):
    """Non-finite values or an unsolvable linear system."""


class SingularScaleError(NumericError):
    """A singular value is too small to invert safely."""


class DegenerateDirectionError(KerHRMError, ValueError):
    """A direction vector has (numerically) zero norm."""


class DegeneratePenaltyError(KerHRMError, ValueError):
    """Fewer than two non-empty environments were supplied to a variance penalty."""


class EmptyEnvironmentError(KerHRMError, ValueError):
    """An environment index set is empty."""


class FormatError(KerHRMError, ValueError):
    """Malformed binary file."""


class ParseError(KerHRMError, ValueError):
    """Malformed text input (CSV or config file)."""


class SizeError(KerHRMError, ValueError):
    """Not enough raw samples to satisfy a request."""


class StuckSamplerError(KerHRMError, RuntimeError):
    """Rejection sampler acceptance rate collapsed."""
