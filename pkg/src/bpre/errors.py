"""Exception hierarchy shared by the whole package."""


class BpreError(Exception):
    """Base class for all package errors."""


class InvalidLaw(BpreError, ValueError):
    pass


class NonZeroP0(InvalidLaw):
    pass


class NotNormalized(InvalidLaw):
    pass


class NegativeMass(InvalidLaw):
    pass


class InvalidEnv(BpreError, ValueError):
    pass


class NotSupercritical(InvalidEnv):
    pass


class NoConvergence(BpreError, RuntimeError):
    def __init__(self, message, bracket=None):
        super().__init__(message)
        self.bracket = bracket


class TruncationExceeded(BpreError, RuntimeError):
    pass


class EnumerationTooLarge(BpreError, ValueError):
    pass


class DivergentSeries(BpreError, RuntimeError):
    pass


class PreconditionViolated(BpreError, ValueError):
    pass


class DegenerateTilt(PreconditionViolated):
    pass


class DegenerateSigma(PreconditionViolated):
    pass


class HypothesisViolated(PreconditionViolated):
    pass


class SchemaError(BpreError, ValueError):
    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


class UnknownStudy(SchemaError):
    pass
