"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so library code should raise
the most specific one that applies.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DataError(ValueError):
    """Bad graph/dataset contents or an unsatisfiable sampling request (exit code 3)."""


class NumericalError(ArithmeticError):
    """A computation produced NaN/Inf; never silently propagated (exit code 4)."""
