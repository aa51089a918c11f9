"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class CorruptFileError(IOError):
    pass


class ConfigError(ValueError):
    pass


class HashMismatchError(RuntimeError):
    """A run directory was produced by a different configuration."""


class MissingStageError(RuntimeError):
    pass
