"""Exception types raised across the package."""


class StatPruneError(Exception):
    """Base class for all package errors."""


class ValidationError(StatPruneError, ValueError):
    """Bad arguments or inconsistent inputs."""


class FormatError(StatPruneError, ValueError):
    """A model or calibration file does not follow the on-disk format."""


class TruncatedFileError(FormatError):
    pass


class SingularFactorError(StatPruneError, ArithmeticError):
    """R11 is numerically singular: the requested rank exceeds the numerical rank."""


class InfeasibleBudgetError(StatPruneError):
    """The FLOPs target is below what the minimum-keep floor allows."""

    def __init__(self, message, floor_ratio=None):
        super().__init__(message)
        self.floor_ratio = floor_ratio


class PipelineError(StatPruneError):
    """Wraps a failure with the pipeline phase and layer it happened in."""

    def __init__(self, phase, layer, cause):
        where = phase if layer is None else f"{phase}, layer {layer}"
        super().__init__(f"[{where}] {cause}")
        self.phase = phase
        self.layer = layer
        self.cause = cause
