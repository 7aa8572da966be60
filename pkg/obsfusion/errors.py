"""Exception families shared across the package.

The CLI maps each family onto its own exit code, so module specific
errors only need to subclass the right family here.
"""


class ObsFusionError(Exception):
    exit_code = 1


class DataFormatError(ObsFusionError):
    """Input bytes do not match a documented format."""

    exit_code = 4

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(ObsFusionError):
    """Degenerate geometry or a non-finite intermediate value."""

    exit_code = 5
