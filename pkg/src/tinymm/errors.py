class ValidationError(ValueError):
    """Malformed record, sample, or scene."""


class ConfigError(ValueError):
    """Inconsistent configuration or violated stage ordering."""


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt or belongs to a different configuration."""
