"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(ValueError):
    """A documented precondition was violated (sizes, counts, scalar-ness)."""


class ParseError(ValueError):
    """A point-cloud or config file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class CheckpointError(ValueError):
    """Checkpoint is unreadable, of the wrong version, or mismatches a config."""
