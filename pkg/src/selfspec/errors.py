"""Exception types shared across the package."""


class SelfspecError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(SelfspecError, ValueError):
    """Operand dimensions are inconsistent."""


class ConfigError(SelfspecError, ValueError):
    """A configuration value violates its invariants."""


class FormatError(SelfspecError, ValueError):
    """A serialized artifact is malformed (bad magic, shape, truncation)."""


class CacheError(SelfspecError, RuntimeError):
    """A KV cache is used at the wrong length or truncated inconsistently."""


class CapacityError(CacheError):
    """A sequence would exceed the configured maximum length."""


class MetricsDomainError(SelfspecError, ValueError):
    """A metric was requested on an empty or inconsistent record."""


class CalibrationError(SelfspecError, RuntimeError):
    """Latency calibration produced a degenerate fit."""


class LosslessnessError(SelfspecError, RuntimeError):
    """Speculative output diverged from the greedy reference."""
