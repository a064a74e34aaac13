"""Exception hierarchy shared by all fabfix modules."""


class FabfixError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(FabfixError, ValueError):
    pass


class BoundsError(FabfixError, ValueError):
    pass


class ShapeError(FabfixError, ValueError):
    pass


class SizeError(ShapeError):
    pass


class FormatError(FabfixError):
    """Malformed raster or weight file.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class GenerationError(FabfixError):
    pass


class TrainingError(FabfixError):
    """Non-finite loss during training; ``epoch`` is where it happened."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class OptimizerError(FabfixError):
    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class InvariantError(FabfixError):
    pass
