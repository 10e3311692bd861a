"""Exception hierarchy shared by every bedgraph module."""


class BedGraphError(Exception):
    """Base class for all errors raised by bedgraph."""


class FormatError(BedGraphError):
    """File does not follow the raster container layout."""


class CorruptError(BedGraphError):
    """Header and payload disagree (truncated file, wrong shape)."""


class IoError(BedGraphError, OSError):
    """Missing input or unwritable destination."""


class GeometryError(BedGraphError):
    """Rasters that must be congruent are not."""


class SchemaError(BedGraphError):
    """A manifest lacks a required key."""


class EmptyInputError(BedGraphError, ValueError):
    pass


class ShapeError(BedGraphError, ValueError):
    pass


class SingularFitError(BedGraphError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class CoverageError(BedGraphError):
    pass


class ConfigError(BedGraphError, ValueError):
    pass


class TriangulationError(BedGraphError):
    pass


class NumericalError(BedGraphError, FloatingPointError):
    """A loss term went non-finite.

    ``term`` names the offending loss term; ``checkpoint`` holds the last
    parameters for which everything was still finite (may be None).
    """

    def __init__(self, message, term=None, checkpoint=None):
        super().__init__(message)
        self.term = term
        self.checkpoint = checkpoint
