"""
Exception types shared by the gaze-diffusion modules.
"""


class GazeDiffusionError(Exception):
    """Base class for all errors raised by this package."""


class DataError(GazeDiffusionError, ValueError):
    """Malformed input: bad shapes, files, corpora or configuration."""


class NumericalError(GazeDiffusionError, ArithmeticError):
    """A non-finite value appeared in a computation that must stay finite."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        message = f"non-finite values at stage '{stage}'"
        if detail:
            message += f": {detail}"
        super().__init__(message)
