"""Exception hierarchy. Each family maps to one CLI exit code."""


class PruneFieldError(Exception):
    exit_code = 1


class ConfigError(PruneFieldError, ValueError):
    exit_code = 2


class InputError(PruneFieldError, ValueError):
    """Invalid argument to an operation (out-of-bounds pixel, bad shape, ...)."""

    exit_code = 2


class DataError(PruneFieldError):
    exit_code = 3


class MissingFileError(DataError, FileNotFoundError):
    def __init__(self, path, what="file"):
        self.path = str(path)
        super().__init__(f"missing {what}: {self.path}")


class MalformedFileError(DataError):
    def __init__(self, path, detail):
        self.path = str(path)
        self.detail = detail
        super().__init__(f"malformed {self.path}: {detail}")


class DimensionMismatchError(DataError):
    def __init__(self, path, expected, actual):
        self.path = str(path)
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"{self.path}: expected dims {self.expected}, got {self.actual}")


class FingerprintMismatchError(DataError):
    pass


class NumericalError(PruneFieldError, ArithmeticError):
    exit_code = 4


class StageError(PruneFieldError):
    """A pipeline stage failed; wraps the underlying error with the stage name."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"stage '{stage}' failed: {cause}")
