"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`IbrError`
so callers (notably the CLI) can map failures onto exit codes.
"""


class IbrError(Exception):
    """Base class for all package errors."""


class NumericFailure(IbrError):
    """A numerical routine failed to produce a usable answer."""


class SingularGridVoltage(IbrError, ValueError):
    """Grid voltage too small to invert the auxiliary-input transform."""


class UndefinedPowerFactor(IbrError, ValueError):
    """Power factor requested at (numerically) zero apparent power."""


class NotHurwitz(IbrError):
    """Closed-loop matrix has an eigenvalue with non-negative real part."""


class Infeasible(IbrError):
    """No multiplier in the bracket makes the pencil positive semidefinite."""

    def __init__(self, message, best_margin=None, best_lambda=None):
        super().__init__(message)
        self.best_margin = best_margin
        self.best_lambda = best_lambda


class BracketExhausted(NumericFailure):
    """The concave maximum of the pencil was not isolated below lambda_max."""


class NotAchievable(IbrError):
    """A setpoint failed certification.

    ``stage`` is one of ``"hurwitz"``, ``"lyapunov"``, ``"sc"``, ``"ic1"``,
    ``"ic2"`` and names the first condition that failed.
    """

    def __init__(self, stage, detail=""):
        super().__init__(f"{stage}: {detail}" if detail else stage)
        self.stage = stage
        self.detail = detail


class NoFeasibleGain(IbrError):
    """Gain synthesis exhausted its budget without a certified gain."""


class NoStabilizingGain(IbrError):
    """Every sampled gain failed the Hurwitz test."""


class NonFiniteState(NumericFailure):
    """Simulated state diverged."""


class RiccatiDiverged(NumericFailure):
    """Newton-Kleinman iteration for the Riccati equation did not converge."""


class ConfigError(IbrError, ValueError):
    """Configuration file could not be parsed or failed validation."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
