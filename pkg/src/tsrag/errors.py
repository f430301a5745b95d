"""Exception hierarchy shared by every module.

Each exception carries a ``category`` string drawn from a fixed taxonomy so
the command-line front end can map failures to stable exit codes.
"""


class TSRAGError(Exception):
    category = "ERROR"


class IOFailure(TSRAGError):
    category = "IO"


class FormatError(TSRAGError):
    category = "FORMAT"


class DimMismatchError(TSRAGError, ValueError):
    category = "DIM_MISMATCH"


class HashMismatchError(TSRAGError):
    category = "HASH_MISMATCH"


class LeakageError(TSRAGError):
    category = "LEAKAGE"


class NumericError(TSRAGError, ArithmeticError):
    category = "NUMERIC"


# exit codes used by the CLI; 1 is reserved for uncategorised failures
EXIT_CODES = {
    "IO": 2,
    "FORMAT": 3,
    "DIM_MISMATCH": 4,
    "HASH_MISMATCH": 5,
    "LEAKAGE": 6,
    "NUMERIC": 7,
}
