"""
Exception hierarchy shared by every package in the pipeline
"""


class ForecastOccError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigurationError(ForecastOccError):
    """Invalid configuration, preset or geometry."""

    exit_code = 2


class ContractError(ForecastOccError):
    """A pre- or post-condition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class NumericError(ForecastOccError):
    """Non-finite losses or failed numerical checks."""

    exit_code = 3


class GenerationError(ForecastOccError):
    """Scene generation could not satisfy its constraints."""


class CheckpointError(ForecastOccError):
    """Checkpoint missing, corrupt or incompatible with the model."""


class DatasetError(ForecastOccError):
    """Dataset files missing or unreadable."""
