from typing import Any, Dict, List, Optional, Sequence


class NFSError(Exception):
    """Base class for every error raised by the feature search library."""


class ConfigValidationError(NFSError):
    """Custom exception for structured validation errors."""
    def __init__(self, errors: List[Dict]):
        self.errors = errors
        super().__init__("Validation failed: " + "; ".join(e.get("message", "") for e in errors))


class ShapeMismatchError(NFSError):
    def __init__(self, op: str, dimension: str, expected: Any, actual: Any):
        self.op = op
        self.dimension = dimension
        self.expected = expected
        self.actual = actual
        super().__init__(f"{op}: shape mismatch on {dimension} (expected {expected}, got {actual})")


class DegenerateOutputError(NFSError):
    def __init__(self, op: str, output_shape: Sequence[int]):
        self.output_shape = tuple(output_shape)
        super().__init__(f"{op}: degenerate output shape {self.output_shape}")


class DegenerateBatchError(NFSError):
    pass


class DomainError(NFSError):
    pass


class DetachedTensorError(NFSError):
    pass


class NonScalarLossError(NFSError):
    pass


class MissingForwardStateError(NFSError):
    pass


class ModalityError(NFSError):
    pass


class LabelRangeError(NFSError):
    pass


class InsufficientDataError(NFSError):
    pass


class MissingIdentityError(NFSError):
    pass


class NoRelevantItemError(NFSError):
    pass


class CheckpointFormatError(NFSError):
    pass


class LossExplosionError(NFSError):
    """Raised when a loss turns NaN/Inf; carries the state needed to debug it."""
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
