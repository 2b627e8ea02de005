"""Exception types shared across the package."""


class DimensionMismatchError(ValueError):
    """Operands live on Hilbert spaces of different dimension."""


class ZeroNormError(ValueError):
    """A state with (numerically) zero norm cannot be normalized."""


class PropagationError(RuntimeError):
    """Numerical propagation left its validity envelope (norm growth,
    trace drift, failed jump-time bisection)."""


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


class OptimizationAborted(RuntimeError):
    """Optimization stopped before completing; partial results attached.

    Attributes
    ----------
    controls : tuple
        Last accepted control fields.
    records : tuple
        Iteration records accumulated before the abort.
    """

    def __init__(self, message, controls=(), records=()):
        super().__init__(message)
        self.controls = tuple(controls)
        self.records = tuple(records)
