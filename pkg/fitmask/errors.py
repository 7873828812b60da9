"""
Exception types shared across the package.

Argument errors stay plain ValueError and io errors stay the built-in OSError family.
"""


class FitmaskError(Exception):
    pass


class ConfigurationError(FitmaskError, ValueError):
    """Shape contracts, unknown config keys, inconsistent variant overrides."""


class NumericError(FitmaskError, FloatingPointError):
    """Non-finite activations or losses, zero-norm vectors."""


class NonFiniteLossError(NumericError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class StateError(FitmaskError, RuntimeError):
    """Empty queue, parameter schema mismatch between query and key networks."""


class DataError(FitmaskError, ValueError):
    """Empty classes, too few items, undecodable images."""


class CheckpointFormatError(FitmaskError, ValueError):
    pass


class FitmaskWarning(UserWarning):
    pass
