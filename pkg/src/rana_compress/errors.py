from typing import Optional, Sequence


class RanaError(ValueError):
    """Base class for every error raised by the toolkit. Carries the CLI exit code."""

    exit_code: int = 1


class ConfigError(RanaError):
    exit_code = 1


class ShapeMismatchError(RanaError):
    exit_code = 3

    def __init__(
        self,
        message: str,
        left: Optional[Sequence[int]] = None,
        right: Optional[Sequence[int]] = None,
    ):
        self.left = tuple(left) if left is not None else None
        self.right = tuple(right) if right is not None else None
        if left is not None or right is not None:
            message = f"{message} (got {self.left} and {self.right})"
        super().__init__(message)


class NonFiniteError(RanaError):
    exit_code = 3


class SvdConvergenceError(RanaError):
    def __init__(self, message: str, iterations: int):
        self.iterations = iterations
        super().__init__(f"{message} after {iterations} attempts")


class DecompositionError(RanaError):
    pass


class CalibrationError(RanaError):
    pass


class MaskerTrainingError(RanaError):
    def __init__(self, message: str, epoch: int):
        self.epoch = epoch
        super().__init__(f"{message} (epoch {epoch})")


class InfeasibleBudgetError(RanaError):
    exit_code = 4

    def __init__(self, message: str, minimum_flops: Optional[float] = None):
        self.minimum_flops = minimum_flops
        if minimum_flops is not None:
            message = f"{message}; minimum feasible FLOPs: {minimum_flops:.0f}"
        super().__init__(message)


class TensorFormatError(RanaError):
    exit_code = 2

    def __init__(self, path: str, offset: int, reason: str):
        self.path = path
        self.offset = offset
        super().__init__(f"{path}: {reason} at byte offset {offset}")


class BundleNotFoundError(RanaError):
    exit_code = 5
