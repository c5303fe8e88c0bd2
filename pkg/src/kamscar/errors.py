"""Exception hierarchy.

Every error raised on purpose by the package derives from ``KamScarError``.
The CLI maps the three families below onto its exit codes.
"""


class KamScarError(Exception):
    """Base class for all package errors."""


class NumericalError(KamScarError):
    """A numerical routine could not produce a trustworthy result (exit code 3)."""


class HypothesisViolation(KamScarError):
    """A structural hypothesis on the Hamiltonian fails (exit code 2)."""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class ConfigError(KamScarError, ValueError):
    """Invalid configuration or input document (exit code 4)."""


class PreconditionError(KamScarError, ValueError):
    """A documented precondition of an operation is not met."""


class SymmetryViolation(NumericalError):
    pass


class DegenerateFrequencyMap(NumericalError):
    pass


class ResolutionError(NumericalError):
    pass


class OutOfDomain(PreconditionError):
    pass


class SingularEta(NumericalError):
    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


class SmallDivisor(NumericalError):
    def __init__(self, k, divisor):
        super().__init__(f"small divisor |<omega, k>| = {divisor:.3g} at k = {k}")
        self.k = k
        self.divisor = divisor


class NearDegeneracy(NumericalError):
    def __init__(self, k, gap):
        super().__init__(f"near-degenerate coupling at k = {k} (gap {gap:.3g})")
        self.k = k
        self.gap = gap


class DegeneratePair(NumericalError):
    pass


class InsufficientData(NumericalError):
    pass


class BoundaryContamination(NumericalError):
    pass


class SolverFailure(NumericalError):
    pass


class DimensionMismatch(PreconditionError):
    pass


class CoverageError(NumericalError):
    pass


class EmptyNonresonantSet(NumericalError):
    pass
