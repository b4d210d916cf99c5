"""Exception types shared across modules."""


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""
