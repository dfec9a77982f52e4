"""Exception hierarchy shared by every module."""


class BrainmarkersError(Exception):
    pass


class FormatError(BrainmarkersError):
    """Malformed file contents. ``offset`` is the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedFormatError(FormatError):
    pass


class ValidationError(BrainmarkersError):
    pass


class SpecError(BrainmarkersError):
    pass


class DegenerateInputError(BrainmarkersError, ValueError):
    pass


class ConfigurationError(BrainmarkersError):
    pass


class AssemblyError(BrainmarkersError):
    pass


class StratificationError(BrainmarkersError, ValueError):
    pass


class MetricUndefinedError(BrainmarkersError, ValueError):
    pass
