"""Exception taxonomy shared by the library and the CLI exit codes."""


class ValidationError(ValueError):
    """Bad inputs: shape mismatches, invalid configs, violated preconditions."""


class NumericalError(ArithmeticError):
    """Non-finite values or diverging optimization."""


class FormatError(RuntimeError):
    """Corrupt or unreadable on-disk artifacts (bad magic, truncation, version)."""
