"""Exception hierarchy shared across the package."""


class PairSplatError(Exception):
    """Base class for all library errors."""


class ShapeError(PairSplatError, ValueError):
    pass


class InvalidKernelError(PairSplatError, ValueError):
    pass


class InvalidRateError(PairSplatError, ValueError):
    pass


class InvalidSplitError(PairSplatError, ValueError):
    pass


class ConfigError(PairSplatError, ValueError):
    """Raised for configs that violate an invariant; ``key`` names the offender."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class ProtocolError(PairSplatError, ValueError):
    pass


class CheckpointError(PairSplatError, ValueError):
    """Malformed checkpoint or scene file.  ``offset`` is the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class NonFiniteError(PairSplatError, RuntimeError):
    pass
