"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class SymbioticError(Exception):
    exit_code = 1


class ConfigError(SymbioticError):
    """Invalid parameter values (sizes, counts, rates)."""

    exit_code = 3


class UsageError(SymbioticError):
    """Bad invocation: missing config keys, unknown enum values, clobbering."""

    exit_code = 2


class ShapeError(SymbioticError, ValueError):
    exit_code = 3


class DegenerateBatchError(SymbioticError):
    exit_code = 3


class EmptyLossError(SymbioticError):
    exit_code = 3


class UndefinedMetricError(SymbioticError):
    exit_code = 3


class LabelRangeError(SymbioticError):
    exit_code = 3


class CorruptDatasetError(SymbioticError):
    exit_code = 3


class VersionError(SymbioticError):
    exit_code = 3


class AlignmentError(SymbioticError):
    exit_code = 3


class DivergenceError(SymbioticError):
    exit_code = 4

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
