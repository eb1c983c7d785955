"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class GlmArError(Exception):
    exit_code = 1


class ConfigError(GlmArError):
    """Bad flags, bad config file entries or an invalid config object."""

    exit_code = 1


class DataError(GlmArError):
    exit_code = 2


class MaskError(DataError):
    pass


class BundleError(DataError):
    """Malformed dataset bundle. The message names the file and, when known, the line."""

    def __init__(self, path, message, line=None):
        super().__init__(str(path), message, line)
        self.path = str(path)
        self.message = message
        self.line = line

    def __str__(self):
        where = f"{self.path}:{self.line}" if self.line is not None else self.path
        return f"{where}: {self.message}"


class DesignRankError(DataError):
    def __init__(self, dependent_columns):
        super().__init__(list(dependent_columns))
        self.dependent_columns = list(dependent_columns)

    def __str__(self):
        return ("design matrix is rank deficient; dependent columns: "
                + ", ".join(str(c) for c in self.dependent_columns))


class NumericalError(GlmArError):
    exit_code = 3


class InvalidStateError(NumericalError):
    """Raised when a gradient is requested at a state with a nonpositive precision."""


class FactorizationError(NumericalError):
    pass


class NotPositiveDefiniteError(NumericalError):
    pass
