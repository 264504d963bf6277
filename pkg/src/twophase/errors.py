"""Exception and warning types raised across the package."""


class TwoPhaseError(Exception):
    """Base class for all package errors."""


class SingularDesign(TwoPhaseError):
    """The weighted design matrix is rank deficient."""


class SingularInformation(TwoPhaseError):
    """The summed score derivative matrix cannot be inverted."""


class NonConvergenceWarning(UserWarning):
    """An iterative solver hit its iteration cap."""


class AllDispersionZero(TwoPhaseError):
    """Every stratum has zero dispersion, so Neyman shares are undefined."""


class Infeasible(TwoPhaseError):
    """No integer allocation satisfies the size constraints."""


class SingularAuxiliaries(TwoPhaseError):
    """The auxiliary matrix (with intercept) is rank deficient."""


class WaveInfeasible(Infeasible):
    """A multiwave plan cannot meet its per-stratum floors or caps."""


class CalibrationDivergence(TwoPhaseError):
    """The raking Newton iteration failed to converge."""


class RankDeficientConstraints(TwoPhaseError):
    """Sampled auxiliaries do not span the calibration constraints."""


class ConfigError(TwoPhaseError):
    """A scenario or run configuration is invalid."""


class ParseError(TwoPhaseError):
    """A CSV input could not be interpreted.

    Parameters
    ----------
    message : str
        Description of the problem.
    row, column : optional
        1-based data row and column name where the problem was found.
    """

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class FailureRateExceeded(TwoPhaseError):
    """Too many replicates failed for the aggregated metrics to be trusted."""
