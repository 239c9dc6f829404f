"""Exception hierarchy.

The CLI maps each family to a fixed exit code, so raise the most specific
class that applies.
"""


class AduraError(Exception):
    """Base class for all package errors."""


class ShapeError(AduraError, ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(AduraError, ValueError):
    """Argument outside the mathematical domain of a function."""


class GraphError(AduraError, RuntimeError):
    """Misuse of the recorded computation graph."""


class ConfigError(AduraError, ValueError):
    """Invalid or inconsistent configuration."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class LabelParseError(AduraError, ValueError):
    """A label CSV cell is outside the accepted alphabet."""

    def __init__(self, row, column, token):
        self.row = row
        self.column = column
        self.token = token
        super().__init__(f"row {row}, column {column!r}: unknown label token {token!r}")


class CheckpointError(AduraError, IOError):
    """A checkpoint file is truncated, corrupt or of the wrong format."""


class NumericalDivergence(AduraError, ArithmeticError):
    """A loss term or gradient became non-finite."""

    def __init__(self, part, message=""):
        self.part = part
        super().__init__(f"non-finite value in {part}" + (f": {message}" if message else ""))
