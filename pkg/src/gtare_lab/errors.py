"""Exception hierarchy shared by every solver in the package."""


class GtareLabError(Exception):
    """Base class for all package errors."""


class InvalidInput(GtareLabError, ValueError):
    """Malformed matrices, wrong dimensions or asymmetric data."""


class SingularWeight(GtareLabError):
    """A weight block that must be inverted is (numerically) singular."""


class NotStable(GtareLabError):
    """A closed loop expected to be mean-square stable is not."""


class IllConditioned(GtareLabError):
    """A linear system is too badly conditioned to be solved reliably."""


class InvalidL(GtareLabError):
    """The initial gain L failed the admissibility check."""


class InvalidConfig(GtareLabError, ValueError):
    """Simulation or run configuration is inconsistent."""


class InvalidBatch(GtareLabError):
    """A sample batch lacks the fields needed by a regression."""


class InvalidPrior(GtareLabError, AttributeError):
    """A learner was handed the wrong level of prior knowledge, or asked for a hidden matrix."""


class Diverged(GtareLabError):
    """A simulated state left the overflow guard."""


class MaxIterations(GtareLabError):
    """An iteration cap was hit; ``report`` holds the partial trace."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class RankDeficient(GtareLabError):
    """The data matrix does not have the column rank the regression needs."""

    def __init__(self, message, rank_report=None, report=None):
        super().__init__(message)
        self.rank_report = rank_report
        self.report = report
