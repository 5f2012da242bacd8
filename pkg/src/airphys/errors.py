"""Exception hierarchy shared by every pipeline stage."""


class AirPhysError(Exception):
    """Base class for all package errors."""


class SchemaError(AirPhysError):
    """Input is missing a mandatory column or uses an unknown name."""


class RowError(AirPhysError):
    """A single input row could not be parsed."""

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class EmptyInputError(AirPhysError):
    pass


class UnimputableVariableError(AirPhysError):
    pass


class SpecError(AirPhysError):
    """A feature or model configuration is invalid."""


class DegenerateColumnError(AirPhysError):
    def __init__(self, column: str, message: str = "zero variance"):
        super().__init__(f"column {column!r}: {message}")
        self.column = column


class DegenerateTargetError(AirPhysError):
    pass


class ShapeError(AirPhysError, ValueError):
    pass


class SplitError(AirPhysError):
    pass


class LeakageError(AirPhysError):
    """A window or split would let future targets inform training."""


class CollinearityError(AirPhysError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__("design is rank deficient; dependent columns: " + ", ".join(self.columns))


class InsufficientDataError(AirPhysError):
    pass


class ContractError(AirPhysError):
    pass


class StateError(AirPhysError):
    pass


class DivergenceError(AirPhysError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


class AlignmentError(AirPhysError):
    pass


class ConfigError(AirPhysError):
    pass


class MissingArtifactError(AirPhysError):
    pass


class SearchFailedError(AirPhysError):
    """Every trial of a hyperparameter search failed."""
