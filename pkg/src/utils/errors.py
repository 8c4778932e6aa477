from src.utils.constants import EXIT_DATA_ERROR, EXIT_NUMERIC_FAILURE, EXIT_USAGE


class VlamdError(Exception):
    """
    Base class for every error raised by the recognizer package.
    """
    exit_code = EXIT_USAGE


class DimensionError(VlamdError):
    pass


class AxisError(VlamdError):
    pass


class RankError(VlamdError):
    pass


class ShapeError(VlamdError):
    pass


class InputTooSmallError(ShapeError):
    pass


class VocabError(VlamdError):
    exit_code = EXIT_DATA_ERROR


class LengthError(VlamdError):
    pass


class AlignmentError(VlamdError):
    pass


class NumericError(VlamdError):
    exit_code = EXIT_NUMERIC_FAILURE


class ConfigError(VlamdError):
    exit_code = EXIT_USAGE


class DataError(VlamdError):
    exit_code = EXIT_DATA_ERROR


class CapacityError(DataError):
    pass


class LayoutError(DataError):
    pass


class CheckpointError(DataError):
    pass


class InputError(VlamdError):
    exit_code = EXIT_DATA_ERROR
