"""Exception types shared across the package."""


class SparseMTError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SparseMTError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(SparseMTError):
    """A config value is out of range or inconsistent with the model."""


class UnknownLanguageError(SparseMTError, KeyError):
    """A language id is not registered in the score table or corpus."""


class InputError(SparseMTError):
    """Runtime input (tokens, batches, file contents) violates a precondition."""


class DegenerateBatchError(SparseMTError):
    """A loss was requested over a batch with no non-pad positions."""


class BatchingError(SparseMTError):
    """A training batch mixes language directions."""


class DivergenceError(SparseMTError):
    """Training produced a non-finite loss."""


class EnumerationError(SparseMTError):
    """Exact enumeration was refused because the state space is too large."""


class DomainError(SparseMTError):
    """A numeric argument is outside its mathematical domain."""
