from collections.abc import Sequence


class NfkamError(Exception):
    pass


class SignatureMismatch(NfkamError):
    pass


class CompletionError(NfkamError):
    def __init__(self, message: str, invariant_factors: Sequence[int]):
        super().__init__(message)
        self.invariant_factors: list[int] = list(invariant_factors)


class DependentGenerators(NfkamError):
    pass


class OffSurfaceError(NfkamError):
    def __init__(self, message: str, defect: float):
        super().__init__(message)
        self.defect: float = defect


class SmallDivisor(NfkamError):
    """Raised when a wavevector fails the Diophantine bound during a homological solve."""

    def __init__(self, k: Sequence[int], divisor: float, bound: float):
        super().__init__(f"small divisor |<k, omega>| = {divisor:.3e} at k = {tuple(k)} (bound {bound:.3e})")
        self.k: tuple[int, ...] = tuple(k)
        self.divisor: float = divisor
        self.bound: float = bound


class ShiftConvergenceError(NfkamError):
    def __init__(self, message: str, residuals: Sequence[float]):
        super().__init__(message)
        self.residuals: list[float] = list(residuals)


class RankConditionError(NfkamError):
    def __init__(self, message: str, block: str, singular_values: Sequence[float] = ()):
        super().__init__(message)
        self.block: str = block
        self.singular_values: list[float] = list(singular_values)


class SingularBorderedMatrix(NfkamError):
    pass


class NoCleanOrder(NfkamError):
    def __init__(self, message: str, log_delta: Sequence[float], log_det: Sequence[float], residual: float):
        super().__init__(message)
        self.log_delta: list[float] = list(log_delta)
        self.log_det: list[float] = list(log_det)
        self.residual: float = residual


class IntegrationError(NfkamError):
    pass


class StageMismatch(NfkamError):
    def __init__(self, stage: str, coefficient: str, expected: float, actual: float):
        super().__init__(f"{stage}: {coefficient} expected {expected!r}, got {actual!r}")
        self.stage: str = stage
        self.coefficient: str = coefficient
        self.expected: float = expected
        self.actual: float = actual
