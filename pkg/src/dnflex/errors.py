"""Exception hierarchy shared by all modules."""


class DnflexError(Exception):
    """Base class for every error raised by the package."""


class ParseError(DnflexError):
    """Input document does not follow the schema."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class TopologyError(DnflexError):
    """Graph is disconnected, cyclic, or references unknown nodes."""


class ValidationError(DnflexError):
    """A value violates a documented invariant."""


class DivergenceError(DnflexError):
    """Newton-Raphson power flow did not converge."""

    def __init__(self, message, mismatch=float("nan"), t=None):
        self.mismatch = mismatch
        self.t = t
        super().__init__(message)


class ConditioningError(DnflexError):
    """Singular or numerically unusable Jacobian."""


class EstimationError(DnflexError):
    """Too many Monte-Carlo scenarios failed."""


class DegenerateTableError(DnflexError):
    """A sensitivity column is identically zero where a level was requested."""


class SolverError(DnflexError):
    """Numerical failure inside an optimisation routine."""

    def __init__(self, message, trace=None):
        self.trace = trace or []
        super().__init__(message)


class InfeasibleError(SolverError):
    """Problem proven infeasible; ``certificate`` holds the Farkas multipliers."""

    def __init__(self, message, certificate=None, trace=None):
        self.certificate = certificate
        super().__init__(message, trace)


class VerificationError(DnflexError):
    """Dispatched injections failed the independent power-flow check."""


class MetricError(DnflexError):
    """A metric is undefined for the supplied inputs (e.g. zero denominator)."""


class NoKneeError(MetricError):
    """Pareto curve is affine within tolerance; no knee exists."""


class SweepError(DnflexError):
    """Too many points of a parameter sweep failed."""
