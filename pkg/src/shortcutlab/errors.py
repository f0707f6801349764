"""Exception hierarchy shared by every shortcutlab module."""


class ShortcutLabError(Exception):
    """Base class for all errors raised by shortcutlab."""


class ConfigError(ShortcutLabError, ValueError):
    """Invalid configuration value or shape disagreement."""


class DataError(ShortcutLabError, ValueError):
    """Malformed data, such as an out-of-range label."""


class PreconditionError(ShortcutLabError, ValueError):
    """An operation was called with inputs violating its precondition."""


class TrainingError(ShortcutLabError, RuntimeError):
    """Training diverged or produced non-finite values."""


class FormatError(ShortcutLabError, OSError):
    """On-disk artifact is truncated, corrupted or of the wrong version."""


class CompatibilityError(ShortcutLabError, ValueError):
    """A checkpoint and a dataset do not belong together."""
