"""Exception hierarchy shared across the pipeline.

Errors that indicate a caller mistake (bad arguments, mismatched shapes,
inconsistent configuration) derive from :class:`ParameterError` and map to
CLI exit code 2; I/O failures use the built-in ``OSError`` family and map to
exit code 3.
"""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(PipelineError, ValueError):
    """An argument value is outside its documented domain."""


class ShapeError(ParameterError):
    """Tensor shapes or dimensions are inconsistent."""


class ConfigurationError(ParameterError):
    """Model / training configuration is internally inconsistent."""


class MetricError(PipelineError):
    """A metric cannot be computed on the given inputs (e.g. empty region)."""


class NumericalError(PipelineError):
    """A numerical guarantee was violated (non-finite values, non-PSD matrix)."""
