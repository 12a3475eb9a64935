"""Exception hierarchy shared across the package."""


class CamnetError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(CamnetError, ValueError):
    """Operands have incompatible shapes; the message names both."""


class GraphError(CamnetError, RuntimeError):
    """Misuse of the autodiff tape (non-scalar backward, dead graph, ...)."""


class ConfigError(CamnetError, ValueError):
    """Invalid or inconsistent run configuration."""


class GenerationError(CamnetError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class ManifestError(CamnetError, ValueError):
    """A dataset manifest row could not be loaded."""


class CheckpointError(CamnetError, ValueError):
    """Checkpoint file is malformed or has the wrong format version."""


class UndefinedCurveError(CamnetError, ValueError):
    """ROC/AUC requested for a class with only one label value present."""


class TrainingDiverged(CamnetError, RuntimeError):
    """Training aborted on a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
