"""Error taxonomy mapped to CLI exit codes (usage 1, data 2, numeric 3)."""


class UsageError(Exception):
    """Bad configuration or arguments, detected before any compute."""


class DataError(Exception):
    """Malformed or inconsistent input data (dataset files, checkpoints)."""


class NumericError(Exception):
    """Numeric breakdown (non-finite values) during compute."""
