"""Exception hierarchy shared across the package."""


class VdmrError(Exception):
    """Base class for all package errors."""


class EmptyContent(VdmrError):
    """A masked query would consist entirely of mask tokens."""


class DimensionMismatch(VdmrError):
    """Tensor shapes or feature dimensions disagree."""


class ZeroVector(VdmrError):
    """A cosine similarity argument has zero norm."""


class UnknownToken(VdmrError):
    """A closed-vocabulary text backend met an out-of-vocabulary token."""


class ParseError(VdmrError):
    """An annotation file line could not be parsed.

    Carries the 1-based line number when available.
    """

    def __init__(self, message, line_number=None):
        super().__init__(message if line_number is None
                         else f"line {line_number}: {message}")
        self.line_number = line_number


class InvalidBoundary(VdmrError):
    """A temporal boundary has end <= start."""


class ConfigError(VdmrError):
    """A training configuration violates its invariants."""


class MissingPrediction(VdmrError):
    """A query in the ground truth has no predictions to evaluate."""
