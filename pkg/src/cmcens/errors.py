"""Exception types shared across the package."""


class CMCError(Exception):
    """Base class for all library errors."""


class InvalidConfig(CMCError, ValueError):
    pass


class DimensionMismatch(CMCError, ValueError):
    pass


class DegenerateVector(CMCError, ValueError):
    """Raised when a vector's norm is too small to normalize."""


class FormatError(CMCError, ValueError):
    """Malformed or truncated binary artifact."""


class EmptyGallery(CMCError, ValueError):
    pass


class EmptyScores(CMCError, ValueError):
    pass


class InsufficientModels(CMCError, ValueError):
    """Variance needs at least two transformed embeddings per item."""


class NonFiniteLoss(CMCError, RuntimeError):
    """Training diverged; the message carries the epoch/step diagnostics."""


class ArtifactConflict(CMCError, RuntimeError):
    """An output directory holds artifacts produced by a different config."""


class BackfillViolation(CMCError, RuntimeError):
    """A new query model embedded gallery samples during a model update."""
