"""Exception hierarchy shared by every module of the package."""


class MkvError(Exception):
    """Base class for all errors raised by :mod:`mkvmaster`."""


class InvalidInputError(MkvError, ValueError):
    """Arguments violate a documented precondition (shapes, sizes, domains)."""


class OffSupportError(InvalidInputError):
    """A measure derivative was requested at a point outside the atoms of the measure."""


class InvalidSpecError(InvalidInputError):
    """A scenario / control specification is internally inconsistent."""


class NumericDomainError(MkvError, ArithmeticError):
    """A function produced a non-finite value.

    ``index`` carries the offending atom (or sample) index when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConvergenceError(MkvError, RuntimeError):
    """An iterative procedure stopped without meeting its tolerance.

    ``gaps`` holds the last recorded residuals (e.g. the two final law-flow gaps).
    """

    def __init__(self, message, gaps=()):
        super().__init__(message)
        self.gaps = tuple(gaps)


class IllConditionedBasisError(MkvError, ArithmeticError):
    """The regression design matrix is rank deficient."""


class BlowUpError(ConvergenceError):
    """Block recursion needed a block shorter than the configured floor."""


class OracleBlowUpError(MkvError, ArithmeticError):
    """A Riccati system left the finite range before reaching the initial time."""
