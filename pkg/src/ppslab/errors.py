"""Error types raised by ppslab.

Every domain error is a ``PpsError`` (and therefore a ``ValueError``), so
callers can catch the whole family at once. The CLI maps ``ConfigError`` to
exit code 2 and every other ``PpsError`` to exit code 1.
"""


class PpsError(ValueError):
    """Base class for numerical and domain errors."""


class InvalidMatrix(PpsError):
    """Matrix is not square, has non-finite entries, exceeds the size cap, or failed to parse."""


class NotHermitian(PpsError):
    pass


class NotPositive(PpsError):
    pass


class NotNormalized(PpsError):
    """Trace (or POVM completeness) condition violated."""


class DimensionMismatch(PpsError):
    pass


class DegeneratePostSelection(PpsError):
    """Post-selection probability at or below the cutoff; the connection state diverges."""


class IncompletePovm(PpsError):
    pass


class UnnormalizedEffect(PpsError):
    """Effect has eigenvalues above one where a probability is required."""


class CommutationRequired(PpsError):
    """Observable commutes with neither the state nor the effect."""


class AliasedCoupling(PpsError):
    """Two distinct eigenvalues produce the same meter transformation."""


class NotUnitary(PpsError):
    pass


class OutOfScheduleRange(PpsError):
    """Requested time lies outside the schedule, or the time arguments are out of order."""


class SingularDesign(PpsError):
    pass


class InconsistentData(PpsError):
    pass


class ZeroProbabilityOutcome(PpsError):
    pass


class ConfigError(PpsError):
    """Invalid CLI or scenario configuration (usage error)."""


class InvalidSchedule(PpsError):
    """Hamiltonian segments are empty, out of order, overlapping or leave gaps."""


class InvalidParameter(PpsError):
    """Scalar argument outside its admissible range (overlap, step size, coupling, branch name)."""
