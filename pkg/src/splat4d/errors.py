"""Exception types shared across the engine."""


class InvalidParameterError(ValueError):
    """Non-finite or out-of-domain values fed to a math primitive."""


class DegenerateRotationError(ValueError):
    """Quaternion collapsed to (near-)zero norm during deformation."""


class ContractViolationError(RuntimeError):
    """Caller broke an API precondition (shape mismatch, stale backward state, ...)."""


class SceneLoadError(ValueError):
    """Scene directory failed validation; message names the offending file/field."""


class NumericalFailureError(RuntimeError):
    """Training produced a non-finite loss; carries the per-term diagnostic dump."""

    def __init__(self, message: str, breakdown: dict | None = None):
        super().__init__(message)
        self.breakdown = breakdown or {}
