"""Exception family shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to:
0 ok, 1 usage, 2 data error, 3 internal invariant violation.
"""


class BTRError(Exception):
    exit_code: int = 3


class InvalidArgumentError(BTRError, ValueError):
    exit_code = 1


class StoreExistsError(BTRError):
    exit_code = 1


class NumericDegenerateError(BTRError):
    exit_code = 2


class CorruptStoreError(BTRError):
    exit_code = 2


class NotFoundError(BTRError, KeyError):
    exit_code = 2

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class CorpusFormatError(BTRError):
    exit_code = 2

    def __init__(self, path: str, line_number: int, message: str):
        super().__init__(f"{path}:{line_number}: {message}")
        self.path = path
        self.line_number = line_number


class StoreWriteError(BTRError):
    exit_code = 2


class TrainingDivergedError(BTRError):
    exit_code = 3


class InvariantViolation(BTRError):
    exit_code = 3
