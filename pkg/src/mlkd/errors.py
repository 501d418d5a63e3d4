"""Exception hierarchy. Each family maps to a CLI exit code."""


class MlkdError(Exception):
    exit_code = 1


class ConfigError(MlkdError):
    exit_code = 2


class CheckpointError(ConfigError):
    pass


class DataError(MlkdError):
    exit_code = 3


class CorpusParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class LabelError(DataError):
    pass


class MergeError(DataError):
    pass


class DivergenceError(MlkdError):
    """Raised when a loss or gradient becomes non-finite."""

    exit_code = 4

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
