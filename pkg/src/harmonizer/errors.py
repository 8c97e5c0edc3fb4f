"""Exception types shared across the package."""


class HarmonizerError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(HarmonizerError):
    """Operand shapes are incompatible for the requested operation."""


class EmptyAttentionError(HarmonizerError):
    """Softmax requested over zero columns (no keys to attend to)."""


class EmptyRegionError(HarmonizerError):
    """A masked reduction was asked for on a mask with zero coverage."""


class EmptyPatchSetError(HarmonizerError):
    """Every candidate background patch was dropped for zero coverage."""


class ValidationError(HarmonizerError):
    """An input violates a documented precondition (e.g. non-binary mask)."""


class ConfigError(HarmonizerError):
    """Bad configuration: unknown key, unparseable value, or invalid combination."""


class CheckpointError(HarmonizerError):
    """Checkpoint file is malformed or inconsistent with its config block."""


class DecodeError(HarmonizerError):
    """An image file could not be decoded."""


class EvaluationError(HarmonizerError):
    """A function under test produced a non-finite value."""


class NonFiniteGradientError(HarmonizerError):
    """An optimizer step saw NaN/Inf gradients; the step was aborted."""
