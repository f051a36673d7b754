"""Exception types shared across the package.

The CLI maps these onto exit codes: validation problems exit 1, numerical
failures exit 2. Library code raises plain ValueError for bad arguments too;
the CLI treats ValueError as a validation problem.
"""


class ValidationError(ValueError):
    """Input, config, or file-format problem detected before computation."""


class NumericalError(RuntimeError):
    """Computation produced NaN/Inf or diverged past a configured guard."""
