"""Exception types shared across the engine.

Every error raised by the library derives from EngineError. The pipeline
entry point tags errors with the stage that produced them (see
solver.infer), so batch drivers can report where a sample failed.
"""


class EngineError(Exception):
    """Base class for all engine errors. `stage` is set by pipeline drivers."""

    stage: str | None = None

    def __str__(self):
        base = super().__str__()
        if self.stage:
            return f"[stage={self.stage}] {base}"
        return base


class DegenerateInput(EngineError):
    """Too few points or rank-deficient geometry for a transform fit."""


class NoConsensus(EngineError):
    """RANSAC failed to find a consensus set of the required size."""


class BehindCamera(EngineError):
    """Point has non-positive depth in the camera frame."""


class OutOfBounds(EngineError):
    """Sample coordinates fall outside the feature map."""


class DimensionMismatch(EngineError):
    """Inconsistent feature dimensions or array shapes."""


class EmptyObservation(EngineError):
    """Observation mask/depth yields fewer than 3 valid pixels."""


class ZeroExtent(EngineError):
    """All points coincide; cloud cannot be normalized."""


class NonFiniteActivation(EngineError):
    """NaN/Inf appeared in a network activation (weight blow-up)."""


class NonFiniteGradient(EngineError):
    """NaN/Inf appeared in a parameter gradient."""


class NonFiniteLoss(EngineError):
    """Training loss became NaN/Inf; training aborts at last checkpoint."""


class NoMatches(EngineError):
    """No assignment entry passed the match threshold."""


class DegenerateViewpoint(EngineError):
    """Camera sits on the symmetry axis; disambiguation is undefined."""


class NoPartMask(EngineError):
    """Operation requires a per-point part mask the model does not have."""


class LengthMismatch(EngineError):
    """Prediction and ground-truth lists are not aligned 1:1."""


class FormatError(EngineError):
    """Malformed binary or JSON artifact."""
