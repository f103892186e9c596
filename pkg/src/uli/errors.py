"""Domain error types shared across modules.

All validation failures raise subclasses of UliError so the CLI can map
them to exit code 2 uniformly.
"""


class UliError(Exception):
    """Base class for all domain validation errors."""


class UnknownSymbol(UliError):
    """Text contains a character outside the configured alphabet."""


class InvalidConcept(UliError):
    """Empty or over-long concept piece list."""


class DuplicateCategory(UliError):
    """Category list contains repeated strings."""


class InvalidCoordinate(UliError):
    """Non-finite coordinate passed to the quantizer."""


class OffsetOverflow(UliError):
    """Coordinate offset falls outside the representable range."""


class DegenerateInstance(UliError):
    """Polygon with zero area or fewer than three vertices."""


class UnknownCategory(UliError):
    """Label not present in the task vocabulary."""


class ScheduleViolation(UliError):
    """Token id outside the vocabulary slice declared for its step."""


class GeometryError(UliError):
    """Image/patch/window/grid sizes do not divide as required."""


class LayoutMismatch(UliError):
    """Embedding tensor shape disagrees with the track layout."""


class CapacityExceeded(UliError):
    """More annotated instances than available grid points."""


class CenterOutside(UliError):
    """Mass center falls outside the polygon (non-star-convex input)."""


class ParseError(UliError):
    """Malformed external input file."""


class TrainingDiverged(UliError):
    """Loss became non-finite; a checkpoint is written before aborting."""
