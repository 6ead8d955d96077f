"""Exception types shared across the package."""


class PromptMatteError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(PromptMatteError, ValueError):
    """Operand shapes or extents are incompatible."""


class CapacityError(PromptMatteError, ValueError):
    """An encoding cannot hold the requested payload."""


class GraphStateError(PromptMatteError, RuntimeError):
    """A computation graph was used after being consumed."""


class GenerationError(PromptMatteError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class TrainingError(PromptMatteError, RuntimeError):
    """Training aborted (non-finite loss or gradients)."""
