# [file name]: errors.py
"""Exception hierarchy shared by the numeric core and the services."""


class BDKError(Exception):
    """Base class for every error raised by this project"""


class ValidationError(BDKError, ValueError):
    """Invalid argument or configuration value"""


class ShapeError(ValidationError):
    """Incompatible layer shapes in a NetworkSpec"""

    def __init__(self, layer_index, layer, message):
        self.layer_index = layer_index
        self.layer = layer
        super().__init__(f"layer {layer_index} ({layer}): {message}")


class NetworkUsageError(BDKError, RuntimeError):
    """backward() called without a matching forward() context"""


class SamplerError(BDKError, ArithmeticError):
    """SGLD chain produced a non-finite gradient"""

    def __init__(self, iteration, message="non-finite log-posterior gradient"):
        self.iteration = iteration
        super().__init__(f"SGLD chain aborted at iteration {iteration}: {message}")


class DistillationError(BDKError, ArithmeticError):
    """Student update produced a non-finite loss"""

    def __init__(self, iteration, message="non-finite distillation loss"):
        self.iteration = iteration
        super().__init__(f"distillation aborted at iteration {iteration}: {message}")


class DataError(BDKError, IOError):
    """Missing or unreadable dataset files"""


class IdxFormatError(DataError):
    """Malformed IDX byte stream"""


class BadMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class ConfigError(BDKError):
    """Unparseable or inconsistent experiment configuration"""


class CheckpointError(BDKError):
    """Checkpoint cannot be used for the requested run"""
