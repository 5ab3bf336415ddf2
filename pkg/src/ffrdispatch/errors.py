"""Exception types shared across the toolkit."""


class FfrError(Exception):
    """Base class for all toolkit errors."""


class DomainError(FfrError, ValueError):
    """An input violates a documented precondition or invariant."""


class UnsupportedStructureError(DomainError):
    """The transfer function has repeated (or near-repeated) poles.

    The pole/residue machinery assumes distinct poles; Jordan-block
    decompositions are out of scope.
    """


class IngestError(FfrError, ValueError):
    """A latency trace file failed validation; carries the offending line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)


class NotReadyError(FfrError, RuntimeError):
    """A path has no latency sample at or before the requested time."""


class UnroutedDeviceError(FfrError, RuntimeError):
    """A device has no selected communication latency yet."""


class InfeasibleError(FfrError, RuntimeError):
    """The dispatch problem cannot be satisfied with the given fleet."""


class NumericalError(FfrError, RuntimeError):
    """A numerical routine failed to converge or diverged."""
