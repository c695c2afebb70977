"""Error taxonomy shared by every module.

The CLI maps these onto exit codes: usage/config problems exit 1, broken or
incompatible files exit 2, numeric failures exit 3.
"""


class StradaError(Exception):
    """Base class for all errors raised by this package."""


class InputError(StradaError):
    """Bad argument values or violated preconditions (exit code 1)."""


class ConfigError(InputError):
    """Invalid, unknown, or inconsistent configuration keys (exit code 1)."""


class CompatibilityError(ConfigError):
    """Checkpoint and requested run configuration disagree (exit code 1)."""


class DataError(StradaError):
    """Unreadable or malformed files and failed integrity checks (exit code 2)."""


class NumericError(StradaError):
    """Non-finite values where finite ones are required (exit code 3)."""
