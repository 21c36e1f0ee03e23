class MatrixCompletionError(Exception):
    """Base class for every error raised by nncomplete."""


class DataError(MatrixCompletionError, ValueError):
    """Input data is malformed or unusable."""


class DimensionMismatch(DataError):
    pass


class AllMissing(DataError):
    pass


class TooFewSamples(DataError):
    pass


class EmptySample(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DuplicateEntry(DataError):
    def __init__(self, key, lines: tuple[int, int]):
        super().__init__(f"duplicate entry {key} on lines {lines[0]} and {lines[1]}")
        self.key = key
        self.lines = lines


class RatingOutOfRange(DataError):
    pass


class EstimationError(MatrixCompletionError):
    """An estimator could not produce a value."""


class NoObservedDonor(EstimationError):
    pass


class ZeroTotalWeight(EstimationError):
    pass


class NonPositiveBandwidth(EstimationError, ValueError):
    pass


class NonPositiveVariance(EstimationError, ValueError):
    pass


class EmptyMeasure(EstimationError, ValueError):
    pass


class NoDefinedDistances(EstimationError):
    pass


class EmptySearchSpace(EstimationError, ValueError):
    pass


class ConfigError(MatrixCompletionError, ValueError):
    """Bench configuration is invalid."""
