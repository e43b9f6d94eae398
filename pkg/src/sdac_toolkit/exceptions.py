from typing import Any, Dict, Optional


class SdacError(Exception):
    """
    Base error for everything raised by the toolkit.

    `code` is a short machine-readable tag, `detail` carries the numbers or
    context that led to the failure. `exit_code` is what the command line
    returns when the error escapes a subcommand.
    """

    exit_code = 1

    def __init__(
        self,
        message: str,
        code: Optional[str] = None,
        detail: Optional[Dict[str, Any]] = None,
    ) -> None:
        super().__init__(message)
        self.message = message
        self.code = code
        self.detail: Dict[str, Any] = dict(detail or {})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": type(self).__name__,
            "message": self.message,
            "code": self.code,
            "detail": self.detail,
        }


class ConfigError(SdacError):
    """Scenario file unreadable, malformed or semantically invalid."""

    exit_code = 2


class SynthesisError(SdacError):
    """A design step cannot produce a valid controller."""

    exit_code = 3


class NumericalConditioningError(SynthesisError):
    pass


class InvalidGeneratorError(SynthesisError):
    """The generator handed in is not Hurwitz (or is singular)."""


class DegeneracyError(SynthesisError):
    pass


class DegenerateRealizationError(DegeneracyError):
    """Every state was truncated while balancing."""


class ConstraintInfeasibleError(SynthesisError):
    pass


class InvalidDiscretizationError(SynthesisError):
    pass


class CompositionError(SynthesisError):
    """Objects combined with each other have incompatible dimensions."""


class NonlinearityError(SynthesisError):
    pass


class DomainError(SynthesisError):
    """A signal or argument does not cover the domain it is used on."""


class SimulationError(SdacError):
    exit_code = 4


class DivergenceError(SimulationError):
    pass


class StepSizeError(SimulationError):
    pass


class ProjectionError(SimulationError):
    pass


class PropertyFailure(SdacError):
    """A checked bound or identity did not hold. All numbers are in `detail`."""

    exit_code = 5


class DependencyError(SdacError):
    """An upstream artifact is missing; the message names its subcommand."""

    exit_code = 6
