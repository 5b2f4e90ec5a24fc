"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An operation was called with arguments outside its domain."""


class ConfigError(ValueError):
    """An experiment configuration file is malformed or inconsistent."""
