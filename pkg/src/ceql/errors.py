"""Exception types shared across the package."""


class CeqlError(Exception):
    """Base class for all package errors."""


class DivisionNearZero(CeqlError, ArithmeticError):
    pass


class LogOfZero(CeqlError, ArithmeticError):
    pass


class InvalidConfig(CeqlError, ValueError):
    pass


class EmptyBatch(CeqlError):
    """Every sample in a batch was flagged invalid."""


class DegenerateModel(CeqlError):
    """Pruning left no path from the inputs to the output."""


class ImaginaryResidue(CeqlError):
    """Extraction refused: active weights still carry imaginary mass."""

    def __init__(self, message, edges=()):
        super().__init__(message)
        self.edges = list(edges)


class SamplingStarved(CeqlError):
    pass


class InvalidWindow(CeqlError, ValueError):
    pass


class NonFiniteGradient(CeqlError, FloatingPointError):
    pass
