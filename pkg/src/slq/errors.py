"""Exception hierarchy shared across the package."""


class SLQError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SLQError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class InputError(SLQError, ValueError):
    """A caller-supplied value violates an operation's precondition."""


class StateError(SLQError, RuntimeError):
    """An object is in the wrong lifecycle state for the call (e.g. frozen)."""


class ContractError(SLQError, ValueError):
    """A documented contract on values (unit norm, scalar loss, ...) is broken."""


class NumericError(SLQError, FloatingPointError):
    """Non-finite values were encountered."""


class DegenerateEmbeddingError(SLQError, ArithmeticError):
    """A pooled vector is zero and cannot be normalized."""


class GenerationError(SLQError, ValueError):
    """Synthetic data generation cannot satisfy a request."""


class IntegrityError(SLQError, IOError):
    """A checkpoint or data file failed checksum or format validation."""


class ContaminationError(SLQError, ValueError):
    """Evaluation ids overlap ids used for training."""


class ConfigError(SLQError, ValueError):
    """A run configuration is malformed or contains unknown keys."""
