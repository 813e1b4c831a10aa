"""Exception hierarchy shared by every module of the package."""


class FGFAError(Exception):
    """Base class for all package errors."""


class InvalidClip(FGFAError, ValueError):
    pass


class InvalidConfig(FGFAError, ValueError):
    pass


class InvalidBox(FGFAError, ValueError):
    pass


class InvalidInputShape(FGFAError, ValueError):
    pass


class ParseError(FGFAError):
    """Malformed annotation file; carries the offending location."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class ValidationError(FGFAError, ValueError):
    pass


class DivergenceError(FGFAError, RuntimeError):
    pass


class CheckpointError(FGFAError):
    pass
