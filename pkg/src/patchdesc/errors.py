"""Error taxonomy shared across the toolkit.

Exit-code mapping used by the CLI: 0 success, 1 usage errors,
2 data errors (ParameterError, FormatError), 3 numerical failures
(GeometryError, NumericalError).
"""


class ToolkitError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ParameterError(ToolkitError, ValueError):
    """An argument violates an operation's preconditions."""


class FormatError(ToolkitError, ValueError):
    """A file or byte stream does not conform to its declared format."""


class GeometryError(ToolkitError, ValueError):
    """A geometric computation is degenerate (singular or near-singular)."""


class NumericalError(ToolkitError, RuntimeError):
    """A numerical procedure failed to produce a usable result."""
