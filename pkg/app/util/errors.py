from enum import IntEnum
from typing import Optional


class ExitCode(IntEnum):
    ok = 0
    parse = 2
    io = 3
    shape = 4
    degenerate = 5
    parameter = 6
    partial = 7


class StrainIQAError(ValueError):
    """Base class of every error the toolkit raises on bad input."""

    exit_code: ExitCode = ExitCode.parameter

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ShapeError(StrainIQAError):
    exit_code = ExitCode.shape


class ParameterError(StrainIQAError):
    exit_code = ExitCode.parameter


class ParseError(StrainIQAError):
    exit_code = ExitCode.parse


class ManifestError(ParseError):
    def __init__(self, message: str, row: Optional[int] = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class JacobianFileError(ParseError):
    pass


class ImageDecodeError(StrainIQAError):
    exit_code = ExitCode.io


class DegenerateError(StrainIQAError):
    """A statistic is undefined for the given data, e.g. a constant series."""

    exit_code = ExitCode.degenerate
