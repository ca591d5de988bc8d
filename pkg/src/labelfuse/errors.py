"""Exception hierarchy shared by every labelfuse module."""


class LabelFuseError(Exception):
    """Base class for all library errors."""


class InvalidInputError(LabelFuseError, ValueError):
    pass


class BehindCameraError(InvalidInputError):
    pass


class ParseError(LabelFuseError, ValueError):
    """Malformed text input. ``line`` is 1-based, or None when unknown."""

    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class UnsupportedModelError(ParseError):
    def __init__(self, model, line=None, source=None):
        self.model = model
        super().__init__(f"unsupported camera model {model!r}", line, source)


class FormatError(LabelFuseError, ValueError):
    pass


class NoSeedError(LabelFuseError, ValueError):
    pass


class InsufficientOverlapError(LabelFuseError, RuntimeError):
    pass


class RegistrationFailedError(LabelFuseError, RuntimeError):
    pass


class DegenerateFragmentError(LabelFuseError, RuntimeError):
    pass


class PipelineError(LabelFuseError, RuntimeError):
    pass
