"""Exception hierarchy shared across the toolkit.

Every failure mode maps to one of these classes so the CLI can translate
errors into stable exit codes (usage/format problems -> 2, numeric -> 3).
"""


class DiveError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(DiveError):
    """Shapes of operands do not line up."""


class NumericError(DiveError):
    """A computation produced NaN/Inf or otherwise left the finite domain."""


class ParameterError(DiveError):
    """An argument is outside its documented range."""


class IndexRangeError(DiveError):
    """An index (token id, target class, channel) is out of range."""


class StateError(DiveError):
    """An operation was called in an invalid order (double backward, missing grads)."""


class RegistryError(DiveError):
    """Unknown domain or other registry lookup failure."""


class CapacityError(DiveError):
    """Not enough data / sequence too long for the requested operation."""


class StatisticsError(DiveError):
    """Too few observations for the requested statistic."""


class ConsistencyError(DiveError):
    """Cross-model invariants violated (trunk mismatch, ledger violation)."""


class FormatError(DiveError):
    """A persisted artifact is corrupt or malformed."""


class CompatibilityError(DiveError):
    """A persisted artifact has an unsupported format version."""
