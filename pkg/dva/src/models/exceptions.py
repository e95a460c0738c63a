from typing import Optional


class DvaError(Exception):
    """Base class for every error raised by the toolkit"""

    exit_code: int = 2


class DimensionError(DvaError, ValueError):
    """Shapes or dimensions do not line up"""


class DegenerateInputError(DvaError, ValueError):
    """Input is valid in type but degenerate in value (zero-norm row, empty box)"""


class ContractError(DvaError, ValueError):
    """A documented precondition of an operation was violated"""

    exit_code = 1


class ParseError(DvaError, ValueError):
    """Malformed record in an input file"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class MissingArtifactError(DvaError, FileNotFoundError):
    """A prerequisite file produced by an earlier stage does not exist"""

    def __init__(self, path: str, hint: Optional[str] = None):
        self.path = str(path)
        message = f"Missing prerequisite artifact: {path}"
        if hint:
            message += f" ({hint})"
        super().__init__(message)


class NumericError(DvaError, ArithmeticError):
    """Training produced a non-finite value"""

    exit_code = 3

    def __init__(self, message: str, dump_path: Optional[str] = None):
        self.dump_path = dump_path
        if dump_path:
            message += f" (diagnostics: {dump_path})"
        super().__init__(message)


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
