"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input or configuration violates a documented contract."""


class ShapeError(ValidationError):
    """Array shape does not match what an operation requires."""


class FingerprintMismatch(RuntimeError):
    """An artifact was produced under a different encoder/config than the
    one it is being used with."""
