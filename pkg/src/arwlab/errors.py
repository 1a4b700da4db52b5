"""Exceptions, warnings, and run statuses shared across the package."""

from enum import Enum


class ArwError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateOperand(ArwError):
    """A site-state operation was applied to an empty site that cannot supply it."""


class InvalidSpec(ArwError):
    """An initial-state or experiment description fails validation."""


class IllegalToppling(ArwError):
    """A toppling was requested at a site that does not meet the mode's precondition."""


class OutOfDomain(ArwError):
    """A site coordinate lies outside the lattice domain."""


class InvalidVolume(ArwError):
    """A target volume is empty, exits the domain, or violates a procedure's needs."""


class WrongModel(ArwError):
    """The model (dimension, jump kernel, sleep rate) does not fit the procedure."""


class NonBinaryInput(ArwError):
    """A procedure requiring at most one particle per site received a fuller site."""


class DensityMismatch(ArwError):
    """Initial-state kinds that must share a density do not."""


class SnapshotFormatError(ArwError):
    """A snapshot or odometer dump could not be parsed."""


class UsageError(ArwError):
    """Bad command-line arguments or config file entries."""


class NotTransient(UserWarning):
    """Return-count estimation requested for a recurrent walk; the sum diverges."""


class ProxyTooSmall(UserWarning):
    """A finite enclosing window was too small to stand in for infinite volume."""


class StabilizeStatus(Enum):
    """Terminal status of a stabilization run."""

    STABLE = "Stable"
    BUDGET_EXCEEDED = "BudgetExceeded"

    def __bool__(self):
        return self is StabilizeStatus.STABLE


class RunStatus(Enum):
    """Terminal status of a procedure or timed dynamics run."""

    SUCCESS = "Success"
    FAILED = "Failed"
    BUDGET_EXCEEDED = "BudgetExceeded"
    UNABSORBED = "Unabsorbed"
