"""
Domain-Specific Exception Classes

These exceptions provide clear, actionable error messages and preserve error context.
Training and evaluation fail fast with explicit diagnostics instead of
continuing on bad numbers or malformed data.
"""


class ConfigurationError(Exception):
    """
    Raised when configuration is invalid or missing.

    Examples:
    - Unknown key in a run config (the message names the dotted key path)
    - Negative attack budget, non-positive step size for an iterative attack
    - Environment settings that cannot be resolved (output dir not creatable)
    """
    pass


class DependencyError(Exception):
    """
    Raised when a required dependency is missing or unavailable.

    Examples:
    - Dataset file or directory does not exist
    - Checkpoint path does not exist
    - Environment variable is not set

    This should be raised before attempting operations that require the dependency.
    """
    pass


class ValidationError(Exception):
    """
    Raised when data validation fails.

    Examples:
    - Pixel values outside [0, 1] or labels outside [0, C)
    - Shape mismatch between a batch and the model config
    - Probabilities outside the open interval (0, 1)
    """
    pass


class CorruptRecordError(ValidationError):
    """Raised when a dataset record cannot be parsed; names the file and byte offset."""

    def __init__(self, path, offset: int, reason: str):
        self.path = str(path)
        self.offset = offset
        self.reason = reason
        super().__init__(f"Corrupt record in {self.path} at offset {offset}: {reason}")


class NumericalError(Exception):
    """
    Raised when a loss or gradient is not finite.

    The message names the offending component (e.g. 'L_kl') or the
    training sub-step label (a-g) so the run can be diagnosed from the log alone.
    """
    pass


class CheckpointError(Exception):
    """
    Raised when a checkpoint file cannot be read or written.

    Examples:
    - Magic header is not DISRO1
    - Component blob missing from the container
    - Parameter shapes disagree with the stored architecture config
    """
    pass
