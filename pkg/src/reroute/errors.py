"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class NumericError(ValueError):
    """Non-finite values where finite numbers are required."""


class DataFormatError(ValueError):
    """Malformed dataset file."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint container."""


class UninitializedStatsError(RuntimeError):
    """Eval-mode batch norm used before any running statistics were recorded."""


class AnalysisError(ValueError):
    """Route-analysis request that is undefined for the given inputs."""
