"""Exception types shared across the toolkit."""


class ReapkitError(Exception):
    """Base class for all toolkit errors."""


class EmptyMask(ReapkitError):
    """Segmentation mask contains no set pixel."""


class Degenerate(ReapkitError):
    """Input does not determine the requested fit (collinear points, etc.)."""


class DegenerateConfiguration(Degenerate):
    """Point correspondences are in degenerate position for the transform."""


class FitFailure(ReapkitError):
    """Polygon simplification could not reach the target vertex count."""


class DivisionByZero(ReapkitError):
    """A point mapped to the line at infinity under a projective transform."""


class EmptyInput(ReapkitError):
    """An aggregation received no data."""


class RankDeficient(ReapkitError):
    """Least-squares design matrix is singular."""


class ZeroVariance(ReapkitError):
    """Moment matching requires nonzero source standard deviation."""


class NoTargetObjects(ReapkitError):
    """No object of the requested class in the provided scenes."""


class NoCleanDetections(ReapkitError):
    """ASR is undefined when nothing is detected on clean images."""


class ParseError(ReapkitError):
    """Annotation file failed schema validation.

    Carries the 1-based line number and a reason string.
    """

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class SchemaVersionMismatch(ReapkitError):
    """Annotation file was written with an unsupported schema version."""


class MissingImage(ReapkitError):
    """Scene image file is absent or unreadable."""


class MissingMask(ReapkitError):
    """Mask file is absent or unreadable."""
