"""Exception hierarchy. ``exit_code`` is what the CLI returns for each class."""


class VodkitError(Exception):
    exit_code = 1


class DataError(VodkitError, ValueError):
    """Input data violates a precondition (empty, malformed, wrong shape)."""

    exit_code = 4


class MalformedLogError(DataError):
    pass


class NumericalError(VodkitError, ArithmeticError):
    exit_code = 5


class DegenerateError(NumericalError):
    """A linear system or decomposition has no unique solution."""
