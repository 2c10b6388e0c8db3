"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class NumericError(ArithmeticError):
    """NaN/Inf or other numeric breakdown."""


class ConfigError(ValueError):
    """Bad configuration file or key."""


class ParseError(ValueError):
    """Malformed on-disk file (sample image, annotations, checkpoint)."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}")
