"""Error taxonomy shared by every service.

Each class carries the exit code the CLI returns when it escapes to the top.
"""


class ChurnLabError(Exception):
    """Base class for all errors raised by the lab"""
    exit_code = 1


class ConfigurationError(ChurnLabError, ValueError):
    """Invalid experiment, architecture or training configuration"""
    exit_code = 2


class ParameterError(ChurnLabError, ValueError):
    """A numeric parameter is outside its admissible range"""
    exit_code = 3


class ShapeError(ChurnLabError, ValueError):
    """Array dimensions do not line up"""
    exit_code = 4


class NumericError(ChurnLabError, ArithmeticError):
    """NaN or infinite values where finite ones are required"""
    exit_code = 5


class DataIOError(ChurnLabError, OSError):
    """A file could not be read or written"""
    exit_code = 6


class ParseError(ChurnLabError, ValueError):
    """A data file is malformed"""
    exit_code = 7


class ExperimentError(ChurnLabError):
    """A training run inside an experiment failed"""
    exit_code = 8
