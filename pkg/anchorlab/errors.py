"""
Exception hierarchy for anchorlab

Every error is a ValueError so callers that only guard against bad input keep
working. The CLI turns these into exit codes and machine-readable JSON.
"""

from typing import Any, Dict


class AnchorLabError(ValueError):
    """Base class for all anchorlab errors"""

    exit_code = 2

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        """Return a JSON-serializable description of the error"""
        payload: Dict[str, Any] = {"error": type(self).__name__, "message": self.message}
        payload.update(self.details)
        return payload


class ConfigError(AnchorLabError):
    pass


class DimensionError(AnchorLabError):
    """Prototype count and dimension violate 2 <= k <= d + 1"""


class ConvergenceError(AnchorLabError):
    """Prototype optimization ran out of epochs above tolerance"""

    exit_code = 1

    def __init__(self, message: str, achieved_deviation: float, **details: Any):
        super().__init__(message, achieved_deviation=achieved_deviation, **details)
        self.achieved_deviation = achieved_deviation


class ShapeError(AnchorLabError):
    pass


class LabelError(AnchorLabError):
    pass


class CountError(AnchorLabError):
    pass


class AnchoringError(AnchorLabError):
    """A loss that needs fixed prototypes was asked to train them"""


class NormalizationError(AnchorLabError):
    """l2 normalization of a zero vector"""


class RateError(AnchorLabError):
    pass


class MapError(AnchorLabError):
    pass


class EmptyClassError(AnchorLabError):
    pass


class FormatError(AnchorLabError):
    """Malformed IDX, CSV, bundle or prototype file"""

    exit_code = 3


class DimMismatch(AnchorLabError):
    pass


class IncompatibleSpec(AnchorLabError):
    pass


class ZeroVectorError(AnchorLabError):
    pass


class ProbabilityError(AnchorLabError):
    pass


class DomainError(AnchorLabError):
    pass
