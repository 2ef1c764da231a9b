"""Exception types shared across the package."""


class OrderIndexError(Exception):
    """Base class for all errors raised by this package."""


class CapacityError(OrderIndexError):
    """Structure is full and was built without growth enabled."""


class StaleHandleError(OrderIndexError):
    """A handle that does not belong to this structure, or was invalidated."""


class DuplicateKeyError(OrderIndexError):
    """Key already present in a predecessor structure."""


class KeyRangeError(OrderIndexError):
    """Key does not fit the structure's configured width."""


class SubsetError(OrderIndexError):
    """Subset id unknown, or a disjointness violation."""


class AuditError(OrderIndexError):
    """An internal structural invariant failed a consistency audit."""
