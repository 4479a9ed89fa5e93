"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to.
"""


class TransConvError(Exception):
    exit_code = 1


class ConfigError(TransConvError, ValueError):
    exit_code = 1


class ShapeError(TransConvError, ValueError):
    exit_code = 1

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class DataError(TransConvError):
    exit_code = 2

    def __init__(self, message, path=None, field=None):
        parts = [message]
        if path is not None:
            parts.append(f"file={path}")
        if field is not None:
            parts.append(f"field={field}")
        super().__init__(" | ".join(parts))
        self.path = path
        self.field = field


class NumericalError(TransConvError, ArithmeticError):
    exit_code = 3
