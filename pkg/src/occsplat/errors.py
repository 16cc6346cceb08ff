"""Exception types shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
NumericError -> 3.
"""


class UsageError(Exception):
    """Bad command-line usage or invalid configuration."""


class DataError(Exception):
    """Missing or malformed input data / files."""


class NumericError(Exception):
    """NaN or other numeric failure detected during computation."""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""
