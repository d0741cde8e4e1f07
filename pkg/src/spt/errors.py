"""Exception hierarchy shared by every subsystem."""


class SPTError(Exception):
    """Base class for all package errors."""


class ContractError(SPTError, ValueError):
    """A precondition on an operation's inputs was violated."""


class DimensionError(ContractError):
    pass


class DegenerateInputError(ContractError):
    pass


class NumericError(SPTError, ArithmeticError):
    pass


class IngestionError(SPTError):
    pass


class ParseError(IngestionError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ValidationError(IngestionError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class ConfigError(SPTError):
    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class TrainingError(SPTError):
    def __init__(self, message: str, step: int | None = None, batch: int | None = None,
                 component: str | None = None):
        self.step = step
        self.batch = batch
        self.component = component
        super().__init__(message)


class CheckpointError(SPTError):
    pass
