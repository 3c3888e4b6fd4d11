"""Exception types raised across the package."""


class SRVAEError(Exception):
    """Base class for all package errors."""


class NumericalError(SRVAEError):
    """A numerical routine could not produce a finite, valid result."""


class NotPositiveDefinite(NumericalError):
    """Cholesky factorisation failed even after the jitter retries."""


class ShapeMismatch(SRVAEError, ValueError):
    pass


class NonScalarRoot(SRVAEError, ValueError):
    """``backward`` was called on a tensor holding more than one element."""


class NegativeCount(SRVAEError, ValueError):
    pass


class MalformedTree(SRVAEError, ValueError):
    """Edge list contains a cycle, a self loop, or leaves the graph disconnected."""


class StructureMismatch(SRVAEError, ValueError):
    pass


class InfiniteKL(NumericalError):
    """KL divergence is infinite: q puts mass where p has none."""


class TooLarge(SRVAEError, ValueError):
    """Exhaustive enumeration requested over too many states."""


class ZeroVariance(SRVAEError, ValueError):
    pass


class TrainingError(NumericalError):
    """Training aborted; ``checkpoint`` holds the last good state."""

    def __init__(self, message, checkpoint=None, operation=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.operation = operation
