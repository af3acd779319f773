from typing import Iterable, Optional

__all__ = (
    "CapsAttackError",
    "ShapeError",
    "DomainError",
    "ContractError",
    "ConfigError",
    "CalibrationError",
    "FormatError",
    "IncompatibilityError",
    "TrainingError",
    "AnalysisError",
    "OutputExistsError",
)


class CapsAttackError(Exception):
    """Base class of every error raised by capsattack."""


class ShapeError(CapsAttackError, ValueError):
    pass


class DomainError(CapsAttackError, ValueError):
    pass


class ContractError(CapsAttackError, RuntimeError):
    pass


class ConfigError(CapsAttackError, ValueError):
    pass


class CalibrationError(CapsAttackError, ValueError):
    pass


class FormatError(CapsAttackError, ValueError):
    pass


class IncompatibilityError(CapsAttackError, ValueError):
    """
    Raised when a checkpoint does not fit the architecture it is loaded into.

    The names of the tensors the architecture expects but the checkpoint lacks
    are available as `missing`.
    """

    def __init__(self, message: str, missing: Optional[Iterable[str]] = None) -> None:
        self.missing = sorted(missing) if missing is not None else []
        if self.missing:
            message = f"{message}: missing {', '.join(self.missing)}"
        super().__init__(message)


class TrainingError(CapsAttackError, RuntimeError):
    def __init__(self, message: str, epoch: int) -> None:
        self.epoch = epoch
        super().__init__(f"{message} (epoch {epoch})")


class AnalysisError(CapsAttackError, ValueError):
    pass


class OutputExistsError(CapsAttackError, FileExistsError):
    pass
