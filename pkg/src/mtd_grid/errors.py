"""Exception hierarchy for mtd_grid.

Every error carries the process exit code the CLI uses for it: input
problems exit with 1, numerical failures with 2.
"""


class MtdGridError(Exception):
    """Base class for all mtd_grid errors."""

    exit_code: int = 1


# ============================================================================
# Input errors (exit code 1)
# ============================================================================

class InputError(MtdGridError):
    """Bad files, bad parameters, bad references."""

    exit_code = 1


class ParseError(InputError):
    """Syntax error in a structured text file."""

    def __init__(self, message: str, source: str = "<string>", line: int = 0, column: int = 0):
        self.source = source
        self.line = line
        self.column = column
        self.reason = message
        super().__init__(f"{source}:{line}:{column}: {message}")


class ValidationError(InputError):
    """Well-formed input whose content violates a model invariant."""


class SingularNetwork(InputError):
    """The network susceptance matrix cannot be inverted (disconnected grid)."""


class InfeasibleDispatch(InputError):
    """Demand exceeds the configured generation capacity."""


class UnknownStateLabel(InputError):
    """An output selection names a state the model does not have."""


class UnknownTarget(InputError):
    """An attack targets a measurement the model does not produce."""


class DimensionMismatch(InputError):
    """Matrix shapes do not agree."""


class ZeroRestriction(InputError):
    """The left null vector vanishes on a cluster and no fallback was given."""


class EmptyCluster(InputError):
    """No cluster has two or more members, so nothing can be calibrated."""


# ============================================================================
# Numerical errors (exit code 2)
# ============================================================================

class NumericalError(MtdGridError):
    """A numerical routine could not produce a trustworthy result."""

    exit_code = 2


class NotSemistable(NumericalError):
    """The matrix does not have exactly one semisimple zero eigenvalue."""


class DefectiveZeroEigenvalue(NumericalError):
    """The zero eigenvalue has a Jordan block."""


class NotHurwitz(NumericalError):
    """A matrix expected to be Hurwitz has an eigenvalue with Re >= 0."""


class NumericalFailure(NumericalError):
    """A solve finished but its residual is above tolerance."""


class NotPSD(NumericalError):
    """A matrix expected to be positive semidefinite is not."""


class HorizonTooShort(NumericalError):
    """The quadrature integrand has not decayed by the end of the horizon."""


class CompletionFailure(NumericalError):
    """The orthonormal completion of the aggregation matrix is rank deficient."""


class NonFinite(NumericalError):
    """The simulated state blew up."""
