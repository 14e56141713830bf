"""Exception and warning types shared across the package."""


class DoseEquivError(Exception):
    """Base class for all package errors."""


class FeasibilityError(DoseEquivError, ValueError):
    """A Gumbel parameter vector yields cell probabilities outside [0, 1]."""


class InfeasibleCorrelation(DoseEquivError, ValueError):
    """Requested correlation lies outside the attainable range for the margins."""


class NonConvergence(DoseEquivError, RuntimeError):
    """An optimizer hit its iteration cap without meeting first-order tolerance."""


class ConstraintInfeasible(DoseEquivError, RuntimeError):
    """No parameter pair satisfying the deviation constraint was found."""


class ConfigError(DoseEquivError, ValueError):
    """Invalid run configuration."""


class DataError(DoseEquivError, ValueError):
    """Base class for input data problems."""


class MalformedRow(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MixedSchema(DataError):
    """Subject-level and aggregated count rows in the same file."""


class EmptyGroup(DataError):
    """A treatment group has fewer than two distinct doses."""


class SeparationWarning(RuntimeWarning):
    """Fit stopped on the parameter box boundary (complete or quasi-complete separation)."""


class BootstrapWarning(RuntimeWarning):
    """Too few bootstrap replicates for the requested quantile."""
