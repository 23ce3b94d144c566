"""Exception types shared across the package."""


class GraspError(Exception):
    """Base class for package-specific errors."""


class DimensionError(GraspError, ValueError):
    """Operands or inputs have incompatible shapes."""


class ConfigError(GraspError, ValueError):
    """A configuration value violates a documented constraint."""


class IntegrityError(GraspError, RuntimeError):
    """Stored or derived data contradicts its own metadata or invariants."""


class DatasetIOError(GraspError, OSError):
    """A dataset file is missing, truncated, or malformed."""


class TrainingDiverged(GraspError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, step, breakdown):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.breakdown = breakdown
