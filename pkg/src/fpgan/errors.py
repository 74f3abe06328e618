"""Exception hierarchy shared across the package.

Each class carries ``exit_code`` and ``prefix`` so the CLI can map any
failure to a single documented exit status and one-line stderr prefix.
"""


class FpganError(Exception):
    exit_code = 1
    prefix = "error"


class ShapeError(FpganError, ValueError):
    prefix = "shape error"


class ContractError(FpganError, ValueError):
    prefix = "contract error"


class ConfigError(FpganError, ValueError):
    prefix = "config error"


class UsageError(FpganError):
    prefix = "usage error"


class DataError(FpganError):
    exit_code = 2
    prefix = "data error"


class FormatError(DataError):
    prefix = "format error"


class VersionError(FormatError):
    prefix = "version error"


class CorruptionError(FormatError):
    prefix = "corruption error"


class DatasetError(DataError):
    prefix = "dataset error"


class InsufficientSamplesError(DataError):
    prefix = "insufficient samples"


class NumericError(FpganError, ArithmeticError):
    exit_code = 2
    prefix = "numeric error"


class TrainingDivergenceError(FpganError):
    exit_code = 3
    prefix = "training diverged"

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        msg = f"non-finite loss at step {step}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
