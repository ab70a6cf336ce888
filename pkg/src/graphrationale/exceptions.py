"""Exception hierarchy shared across the package."""


class GraphRationaleError(Exception):
    """Base class for all package errors."""


class DimensionError(GraphRationaleError):
    """Tensor shapes are incompatible for the requested operation."""


class RankError(GraphRationaleError):
    """Operand has the wrong rank (e.g. non-scalar loss in backward)."""


class DomainError(GraphRationaleError):
    """Input outside the mathematical domain of the operation (log of <= 0, division by zero)."""


class TapeError(GraphRationaleError):
    """Backward pass requested through an already-consumed computation graph."""


class EmptyReductionError(GraphRationaleError):
    """Reduction over an empty axis."""


class ConfigurationError(GraphRationaleError):
    """Invalid configuration value or combination."""


class SamplingError(GraphRationaleError):
    """Episode sampling preconditions violated (too few classes or graphs)."""


class DatasetParseError(GraphRationaleError):
    """Malformed dataset file; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(GraphRationaleError):
    """Structural invariant violated (asymmetric adjacency, bad mask length, ...)."""


class TaskConstructionError(GraphRationaleError):
    """Episode/task cannot be assembled (e.g. a class with no support graphs)."""


class LabelError(GraphRationaleError):
    """Class label outside the valid range."""


class DegenerateBatchError(GraphRationaleError):
    """Contrastive batch where no anchor has a positive pair."""


class AdaptationError(GraphRationaleError):
    """Inner-loop adaptation diverged; carries the step index."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class NumericError(GraphRationaleError):
    """NaN/Inf surfaced in a named loss component or update."""


class InputError(GraphRationaleError):
    """Malformed metric input (length mismatch, empty sequence)."""


class UndefinedMetricError(GraphRationaleError):
    """Metric undefined for the given input (e.g. single-class AUC)."""
