"""Exception hierarchy shared by every component."""


class HsaeError(Exception):
    """Base class for all errors raised by the workbench."""


class InvalidArgumentError(HsaeError, ValueError):
    """An argument is out of range or has the wrong shape."""


class DegenerateInputError(HsaeError, ValueError):
    """Input or parameter is degenerate (zero vector, zero decoder column)."""


class NumericFailureError(HsaeError, ArithmeticError):
    """A nonfinite value appeared in gradients or intermediate results."""


class ShardFormatError(HsaeError):
    """A shard or checkpoint header does not match the expected format."""


class CorruptionError(HsaeError):
    """A file is truncated or its payload disagrees with its header."""


class CheckpointVersionError(HsaeError):
    """A checkpoint was written with an unsupported format version."""


class ShapeMismatchError(HsaeError, ValueError):
    """Loaded parameters do not match the requested configuration."""

    def __init__(self, field: str, expected, actual):
        self.field = field
        super().__init__(
            f"Shape mismatch for '{field}': expected {expected}, got {actual}")


class UndefinedMetricError(HsaeError, ArithmeticError):
    """A metric is undefined for the given inputs."""


class ShardIOError(HsaeError, OSError):
    """Reading or writing an on-disk file failed."""


class ConfigError(HsaeError, ValueError):
    """A config file could not be parsed or validated."""

    def __init__(self, message: str, key: str = None, line: int = None):
        self.key = key
        self.line = line
        location = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{location}")
