"""Exception types shared across the package."""


class IpaLabError(Exception):
    """Base class for all errors raised by ipalab."""


class ShapeError(IpaLabError, ValueError):
    """Arrays with incompatible dimensions were combined."""


class NonFiniteError(IpaLabError, FloatingPointError):
    """A forward value or state went non-finite.

    ``index`` is the offending sample index (batch objectives) or the
    integration step (ODE sampling), whichever applies.
    """

    def __init__(self, message, index=None, step=None):
        super().__init__(message)
        self.index = index
        self.step = step


class AdapterError(IpaLabError):
    """Adapter missing, or trying to mutate a frozen reference."""


class DataError(IpaLabError):
    """Input data is missing, empty or unusable."""


class EmptyCurationError(DataError):
    """Curation produced no surviving samples."""

    def __init__(self, message, audit=None):
        super().__init__(message)
        self.audit = audit


class DivergenceError(IpaLabError):
    """Training produced a non-finite loss; ``record`` holds the telemetry so far."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
