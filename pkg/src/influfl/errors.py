"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad dimensions, out-of-domain values, unknown keys."""


class UsageError(ValueError):
    """An operation was called outside its domain (empty split, M = 1 leave-one-out, ...)."""


class CacheMismatchError(RuntimeError):
    """A backward pass was given an activation cache from a different forward call."""


class DivergenceError(RuntimeError):
    """Non-finite parameters appeared during training."""

    def __init__(self, message, *, client=None, round_index=None):
        super().__init__(message)
        self.client = client
        self.round_index = round_index
