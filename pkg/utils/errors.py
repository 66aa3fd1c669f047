"""Exception hierarchy shared by every stage of the toolkit."""


class RciSysidError(Exception):
    """Base error. `exit_code` is what the CLI returns when it escapes."""

    exit_code = 3

    def __init__(self, message, stage=None, **diagnostics):
        super().__init__(message)
        self.stage = stage
        self.diagnostics = diagnostics

    def with_stage(self, stage):
        """Tag the error with the pipeline stage it surfaced in."""
        if self.stage is None:
            self.stage = stage
        return self


class ConfigError(RciSysidError, ValueError):
    exit_code = 2


class DatasetFormatError(ConfigError):
    """Malformed dataset CSV; `line` is 1-based when known."""

    def __init__(self, message, line=None, column=None):
        super().__init__(message, line=line, column=column)
        self.line = line
        self.column = column


class DimensionError(RciSysidError, ValueError):
    exit_code = 2


class NumericalError(RciSysidError):
    exit_code = 3


class InfeasibleError(RciSysidError):
    exit_code = 4
