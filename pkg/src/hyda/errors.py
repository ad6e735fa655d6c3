"""Exception types raised across the package.

Each error carries the process exit code the command-line interface maps it to.
"""


class HydaError(Exception):
    exit_code = 1


class ConfigError(HydaError, ValueError):
    exit_code = 2


class ShapeError(HydaError, ValueError):
    exit_code = 2


class LabelError(HydaError, ValueError):
    exit_code = 2


class FormatError(HydaError):
    exit_code = 3


class StructureError(HydaError):
    exit_code = 3


class MetricError(HydaError, ValueError):
    exit_code = 4


class NumericError(HydaError, ArithmeticError):
    exit_code = 4
