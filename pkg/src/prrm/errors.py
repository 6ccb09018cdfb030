"""Exception types shared across the toolkit."""


class PrrmError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(PrrmError):
    """Rejected input: tensor shapes are inconsistent with the operation."""


class UnknownKeyError(PrrmError):
    """A parameter key does not resolve to any slot of the model."""


class InvalidStateError(PrrmError):
    """A stateful object violates its invariants (e.g. negative running variance)."""


class UndefinedStatError(PrrmError):
    """A statistic is undefined for the given inputs (e.g. all channels guarded out)."""


class FormatError(PrrmError):
    """A serialized artifact (checkpoint, dataset, report) is malformed."""


class NumericError(PrrmError):
    """A numeric failure such as a NaN loss during training."""
