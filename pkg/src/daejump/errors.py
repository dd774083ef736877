"""Exception hierarchy shared by all daejump modules."""

from __future__ import annotations


class DaeJumpError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(DaeJumpError):
    """Input data violates a basic precondition (non-finite entries, bad shape)."""


class SingularSystemError(DaeJumpError):
    """A linear system that must be solvable is numerically singular."""


class NoConvergenceError(DaeJumpError):
    """An iterative solver ran out of iterations or damping steps.

    Carries the last iterate and its residual norm for diagnosis.
    """

    def __init__(self, message, x_last=None, residual_norm=None, iterations=None):
        super().__init__(message)
        self.x_last = x_last
        self.residual_norm = residual_norm
        self.iterations = iterations


class ProbeEvaluationError(DaeJumpError):
    """A function evaluation failed at a finite-difference probe point."""

    def __init__(self, message, probe=None):
        super().__init__(message)
        self.probe = probe


class IntegrationError(DaeJumpError):
    """The ODE integrator failed (step-size underflow, blow-up).

    ``t_last`` and ``x_last`` hold the last accepted time and state.
    """

    def __init__(self, message, t_last=None, x_last=None):
        super().__init__(message)
        self.t_last = t_last
        self.x_last = x_last


class DomainError(DaeJumpError):
    """A state left (or never was in) the declared domain of validity.

    When raised during an integration the exit time is attached as ``t``.
    """

    def __init__(self, message, x=None, t=None):
        super().__init__(message)
        self.x = x
        self.t = t


class ChartRangeError(DaeJumpError):
    """A coordinate value lies outside the range of the local chart."""


class CapabilityError(DaeJumpError):
    """The scenario lacks the data (chart, reduced dynamics) the operation needs."""


class ScenarioValidationError(DaeJumpError):
    """Scenario construction data is inconsistent."""


class PureOdeError(ScenarioValidationError):
    """The leading matrix is invertible: no algebraic part, nothing to project."""


class SingularEvaluationError(DaeJumpError):
    """The perturbed leading matrix is numerically singular at the requested state."""

    def __init__(self, message, x=None, cond=None):
        super().__init__(message)
        self.x = x
        self.cond = cond


class ConfigError(DaeJumpError):
    """A run/solver configuration value is invalid."""


class PreconditionError(DaeJumpError):
    """An operation-specific precondition does not hold (e.g. off-manifold start)."""


class InconclusiveError(DaeJumpError):
    """A verdict cannot be rendered from the available numerical evidence."""
