"""Exception hierarchy shared by every stage of the pipeline."""


class ArftError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ArftError, ValueError):
    pass


class SchemaError(ArftError, ValueError):
    pass


class ParseError(ArftError, ValueError):
    """A CSV cell could not be parsed; message names the row and column."""


class ConfigError(ArftError, ValueError):
    pass


class ContractError(ArftError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class UndefinedMetricError(ArftError, ValueError):
    """A statistic is mathematically undefined for the given input."""


class TrainingError(ArftError, RuntimeError):
    pass


class StageError(ArftError, RuntimeError):
    """Wraps any failure inside an experiment run with the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
