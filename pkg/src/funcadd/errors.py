"""Exception hierarchy shared by the library and the CLI.

Input problems derive from :class:`InputError` (CLI exit code 2); numerical
breakdowns derive from :class:`NumericalError` (CLI exit code 3).
"""


class InputError(ValueError):
    """Invalid arguments or data shapes."""


class ParseError(InputError):
    """Malformed dataset or configuration file."""


class ConfigError(InputError):
    """Invalid experiment configuration."""


class UnsupportedOrderError(InputError):
    """Thin-plate order other than m = 2 requested where only m = 2 is implemented."""


class NumericalError(ArithmeticError):
    """A linear-algebra step failed or produced non-finite output."""


class DegenerateDesignError(NumericalError):
    """The null-space design matrix is rank deficient."""


class ConditioningError(NumericalError):
    """A penalized system could not be solved; a larger lambda usually helps."""


class ExperimentError(RuntimeError):
    """Too many replications of a simulation failed."""
