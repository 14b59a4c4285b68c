"""Exception types shared across the library.

Everything raised on purpose derives from Error so callers can catch
library failures with one handler; the CLI maps each class to its own
exit code.
"""


class Error(Exception):
    """Base class for every library error."""


class ShapeError(Error):
    """Operands have incompatible or invalid shapes."""


class AxisError(Error):
    """Axis index outside the operand's rank."""


class DTypeError(Error):
    """Unsupported or incompatible element type."""


class DomainError(Error):
    """Integer operation outside its defined domain (e.g. division by zero)."""


class EmptyReduction(Error):
    """max/min/argmax over an axis of extent 0."""


class BackendMismatch(Error):
    """Operands live on different backends."""


class DuplicateBackend(Error):
    """A backend with this id is already registered."""


class UnknownBackend(Error):
    """No backend registered under this id."""


class OutOfMemory(Error):
    """Allocation exceeds the configured capacity even after flushing caches."""


class ManagerBusy(Error):
    """Memory manager swapped or detached while allocations are live."""


class AllocError(Error):
    """Bad free: unknown block id or double free."""


class TraceError(Error):
    """Malformed allocation trace; carries the offending event index."""

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"event {index}: {message}")
        self.index = index


class SeedRequired(Error):
    """backward() on a non-scalar root needs an explicit seed gradient."""


class TapeConsumed(Error):
    """backward() ran twice over a tape recorded without retain_graph."""


class GradShapeError(Error):
    """A backward rule produced a gradient whose shape or dtype differs from its input."""


class MissingGradient(Error):
    """Optimizer stepped over a parameter that has no gradient."""


class EmptyMeter(Error):
    """Meter value requested before any update."""


class FormatError(Error):
    """Malformed serialized stream or data file; carries a byte offset where known."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"byte {offset}: {message}")
        self.offset = offset


class BatchShapeError(Error):
    """Samples in one batch disagree on shape or dtype."""


class DataError(Error):
    """Dataset files missing or unusable."""


class ConfigError(Error):
    """Invalid run configuration."""


class CollectiveShapeError(Error):
    """Ranks passed mismatched shapes or dtypes to a collective."""


class CollectiveTimeout(Error):
    """A rank failed to join a collective within the timeout."""
