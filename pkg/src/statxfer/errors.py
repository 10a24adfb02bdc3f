"""Exception hierarchy shared by the library and the CLI."""


class StatXferError(Exception):
    """Base class for all errors raised by this package."""


class RejectedInputError(StatXferError, ValueError):
    """An argument violates an operation's precondition."""


class ContractViolationError(StatXferError, RuntimeError):
    """An object was used in a state its contract forbids (e.g. a stale tape)."""


class DataError(StatXferError):
    """Dataset ingestion or sampling failed."""


class ParseError(DataError, ValueError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class SamplingError(DataError):
    pass


class TrainingSetupError(StatXferError):
    pass


class EvaluationSetupError(StatXferError):
    pass


class ProjectionError(StatXferError, ValueError):
    pass


class ConfigError(StatXferError):
    pass
