"""Exception types raised across the package."""


class GreenscapeError(Exception):
    """Base class for all package errors."""


class MalformedFile(GreenscapeError):
    pass


class UnknownLabel(GreenscapeError):
    def __init__(self, label_id: int, x: int, y: int):
        super().__init__(f"label {label_id} at (x={x}, y={y}) is not in the class map")
        self.label_id = label_id
        self.x = x
        self.y = y


class MissingChannel(GreenscapeError):
    pass


class NegativeDepth(GreenscapeError):
    def __init__(self, x: int, y: int):
        super().__init__(f"negative depth at (x={x}, y={y})")
        self.x = x
        self.y = y


class NonFiniteDepth(GreenscapeError):
    def __init__(self, x: int, y: int):
        super().__init__(f"non-finite depth at (x={x}, y={y})")
        self.x = x
        self.y = y


class InvalidClassMap(GreenscapeError):
    pass


class DimensionMismatch(GreenscapeError):
    pass


class EmptyImage(GreenscapeError):
    pass


class DomainError(GreenscapeError, ValueError):
    pass


class WindowTooLarge(GreenscapeError):
    pass


class NoVegetation(GreenscapeError):
    pass


class SchemaMismatch(GreenscapeError):
    def __init__(self, column: str):
        super().__init__(f"missing required column {column!r}")
        self.column = column


class BadChoice(GreenscapeError):
    def __init__(self, value: str, row: int):
        super().__init__(f"invalid choice {value!r} on row {row}")
        self.value = value
        self.row = row


class NoRecords(GreenscapeError):
    pass


class ConstantSeries(GreenscapeError):
    pass


class LengthMismatch(GreenscapeError):
    pass


class AllZeros(GreenscapeError):
    pass


class EmptyGroup(GreenscapeError):
    pass


class TooFewEntries(GreenscapeError):
    pass


class EmptyTable(GreenscapeError):
    pass


class DegenerateTarget(UserWarning):
    """Warned (not raised) when a forest is trained on a constant target."""


class ConfigError(GreenscapeError):
    pass


class InvalidRecord(GreenscapeError):
    def __init__(self, message: str, row: int):
        super().__init__(f"row {row}: {message}")
        self.row = row
