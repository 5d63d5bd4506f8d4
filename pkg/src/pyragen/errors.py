"""Exception taxonomy shared across the package.

Argument/shape/configuration problems are ValueError subclasses so callers
can catch the whole family; numerical blow-ups during training get their
own RuntimeError subclass because they carry diagnostic state.
"""


class ShapeError(ValueError):
    """Tensor or image dimensions do not match what an operation requires."""


class ConfigError(ValueError):
    """A configuration value (or combination of values) is invalid."""


class DegenerateInputError(ValueError):
    """Input is structurally unusable, e.g. a mask with no known pixels."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/inf loss. Carries the per-level loss dump."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
