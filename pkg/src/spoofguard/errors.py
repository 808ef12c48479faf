"""Exception hierarchy shared by the library and the CLI.

Each class carries a stable ``code`` token that the CLI prints as the error
prefix, so scripts can match on error class without parsing messages.
"""


class SpoofGuardError(Exception):
    code = "E_GENERIC"


class InvalidInputError(SpoofGuardError, ValueError):
    code = "E_INPUT"


class ConfigError(SpoofGuardError, ValueError):
    code = "E_CONFIG"


class ShapeError(SpoofGuardError, ValueError):
    code = "E_SHAPE"


class ParseError(SpoofGuardError, ValueError):
    code = "E_PARSE"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IdMismatchError(SpoofGuardError, KeyError):
    code = "E_IDS"

    def __str__(self):
        return str(self.args[0]) if self.args else ""
