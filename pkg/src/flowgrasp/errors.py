"""Exception types shared across the package."""


class FlowgraspError(Exception):
    """Base class for all package errors."""


class ContractError(FlowgraspError):
    """A caller violated a documented precondition (shape/dimension mismatch etc.)."""


class NumericError(FlowgraspError):
    """A computation produced or received non-finite values."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class DataError(FlowgraspError):
    """Invalid or inconsistent data (datasets, labels, degenerate inputs)."""


class SerializationError(FlowgraspError):
    """Corrupted, truncated or version-incompatible files."""
