"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes or extents are incompatible."""


class ParameterError(ValueError):
    """A numeric parameter is outside its allowed range."""


class ContractError(ValueError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class DataError(ValueError):
    """A dataset or labeling is malformed or empty."""


class FormatError(ValueError):
    """A serialized file does not match its declared format."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient.

    Carries the episode/step index at which the divergence was detected.
    """

    def __init__(self, message: str, episode: int | None = None):
        super().__init__(message)
        self.episode = episode


class ComparisonError(ValueError):
    """Two run reports are not comparable (different data or seeds)."""
