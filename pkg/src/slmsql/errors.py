"""Exception hierarchy shared across the package."""


class SlmSqlError(Exception):
    """Base class for all package errors."""


class DatabaseNotFound(SlmSqlError, FileNotFoundError):
    pass


class NotADatabase(SlmSqlError):
    pass


class DatabaseUnavailable(SlmSqlError):
    """A task's db_id does not resolve to a loadable database."""


class UnknownTable(SlmSqlError, KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"unknown table: {self.name!r}"


class MissingVariable(SlmSqlError, KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"missing template variable: {self.name!r}"


class UnknownStage(SlmSqlError, ValueError):
    pass


class InvalidConfig(SlmSqlError, ValueError):
    pass


class BackendError(SlmSqlError):
    pass


class BackendUnavailable(BackendError):
    """Transport failure after bounded retries, or no backend bound for a role."""


class BackendRejected(BackendError):
    """The server answered with a non-success status."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class StageError(SlmSqlError):
    """A backend error annotated with the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


class IncomparableShapes(SlmSqlError, ValueError):
    pass


class MalformedDataset(SlmSqlError, ValueError):
    def __init__(self, index: int, field: str, reason: str = "missing"):
        super().__init__(f"entry {index}: field {field!r} {reason}")
        self.index = index
        self.field = field


class CorruptTrace(SlmSqlError, ValueError):
    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
