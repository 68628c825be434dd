"""Exception hierarchy shared by all modules."""


class QMarkovError(Exception):
    """Base class for every error raised by this package."""


class NotSquareError(QMarkovError, ValueError):
    pass


class NonHermitianError(QMarkovError, ValueError):
    pass


class NotPSDError(QMarkovError, ValueError):
    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class NotInSpanError(QMarkovError, ValueError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DependentBasisError(QMarkovError, ValueError):
    pass


class DimensionCapError(QMarkovError, ValueError):
    pass


class CARViolationError(QMarkovError, RuntimeError):
    pass


class InvariantViolation(QMarkovError, RuntimeError):
    """An internal cross-check failed; indicates a defect, not bad input."""


class NoMatrixUnitsError(QMarkovError, ValueError):
    pass


class NormalizationError(QMarkovError, ValueError):
    pass


class CommutantError(QMarkovError, ValueError):
    pass


class MarkovPropertyError(QMarkovError, ValueError):
    pass


class PreconditionError(QMarkovError, ValueError):
    pass


class NotCompletelyPositiveError(QMarkovError, ValueError):
    def __init__(self, message, min_eigenvalue=None, witness=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue
        self.witness = witness


class DegenerateInitialStateError(QMarkovError, ValueError):
    pass


class StateDefectError(QMarkovError, RuntimeError):
    def __init__(self, message, min_eigenvalue=None, trace=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue
        self.trace = trace


class HorizonError(QMarkovError, ValueError):
    pass
