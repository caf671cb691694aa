"""Exception hierarchy shared by every covermap module."""


class CovermapError(Exception):
    """Base class for all covermap errors."""

    exit_code = 3


class ConfigError(CovermapError, ValueError):
    exit_code = 2


class FormatError(CovermapError, ValueError):
    pass


class RasterIOError(CovermapError, OSError):
    pass


class WindowError(CovermapError, ValueError):
    pass


class ShapeError(CovermapError, ValueError):
    pass


class PredictorError(CovermapError, RuntimeError):
    def __init__(self, message, tile_index=None):
        super().__init__(message)
        self.tile_index = tile_index


class StitchError(CovermapError, RuntimeError):
    pass


class DegenerateInput(CovermapError, ValueError):
    pass


class TrainingError(CovermapError, RuntimeError):
    pass


class GeometryError(CovermapError, ValueError):
    pass


class CheckFailure(CovermapError, AssertionError):
    exit_code = 4
