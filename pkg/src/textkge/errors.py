"""Exception classes shared across the package.

The CLI maps these onto distinct exit codes, so keep the split:
usage/config problems, bad input data, and numerical blow-ups.
"""


class ConfigError(Exception):
    """Invalid configuration: unknown key, bad value, inconsistent settings."""


class DataError(Exception):
    """Malformed or inconsistent input data (graph files, corpus files, checkpoints)."""


class NumericalError(Exception):
    """A computation produced a non-finite value and training cannot continue."""
