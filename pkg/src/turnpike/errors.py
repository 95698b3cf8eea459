"""Exception hierarchy shared by all turnpike modules."""


class TurnpikeError(Exception):
    """Base class; ``stage`` names the pipeline step that raised."""

    stage = "turnpike"


# linham
class LinearAlgebraError(TurnpikeError):
    stage = "linham"


class NotStabilizable(LinearAlgebraError):
    pass


class NotDetectable(LinearAlgebraError):
    pass


class NotHurwitz(LinearAlgebraError):
    pass


class NumericalFailure(LinearAlgebraError):
    pass


# odeflow
class IntegrationError(TurnpikeError):
    stage = "odeflow"


class StepSizeUnderflow(IntegrationError):
    pass


class StateBlowup(StepSizeUnderflow):
    """State norm left the admissible box (finite-time escape)."""


class NonFiniteDerivative(IntegrationError):
    pass


# model
class ModelError(TurnpikeError):
    stage = "model"


class InconsistentDerivative(ModelError):
    pass


class NoConvergence(ModelError):
    pass


# shooting
class ShootingError(TurnpikeError):
    stage = "shooting"


class NewtonDivergence(ShootingError):
    """Newton failed; ``best`` holds the best iterate found (may be None)."""

    def __init__(self, message, best=None, diagnostics=None):
        super().__init__(message)
        self.best = best
        self.diagnostics = diagnostics or {}


class IntegrationBlowup(ShootingError):
    """A shooting segment escaped; ``segment`` is its index when known."""

    def __init__(self, message, segment=None):
        super().__init__(message)
        self.segment = segment


class SingularShootingJacobian(ShootingError):
    pass


class ContinuationStalled(ShootingError):
    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


# manifolds
class ManifoldError(TurnpikeError):
    stage = "manifolds"


class InvalidBaseline(ManifoldError):
    pass


# certificate
class CertificateError(TurnpikeError):
    stage = "turnpike"


class InsufficientHorizons(CertificateError):
    pass


class DegenerateProfile(CertificateError):
    pass


# cli
class CliError(TurnpikeError):
    stage = "cli"


class ParseError(CliError):
    def __init__(self, message, offset, expected=()):
        self.offset = offset
        self.expected = tuple(sorted(set(expected)))
        detail = f" (expected one of: {', '.join(self.expected)})" if self.expected else ""
        super().__init__(f"{message} at offset {offset}{detail}")


class UnknownSystem(CliError):
    pass


class ConfigError(CliError):
    pass
