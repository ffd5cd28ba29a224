"""Exception types shared across modules."""


class KamresError(Exception):
    """Base class for all package errors."""


class InvalidInput(KamresError, ValueError):
    pass


class DomainError(KamresError, ValueError):
    pass


class DegenerateProfile(KamresError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class InfeasibleParameters(KamresError):
    pass


class CoveringFailure(KamresError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class SmallDivisor(KamresError):
    def __init__(self, message, y=None, m=None):
        super().__init__(message)
        self.y = y
        self.m = m


class StepTooLarge(KamresError):
    def __init__(self, message, theta=None, report=None):
        super().__init__(message)
        self.theta = theta
        self.report = report


class ContinuationFailure(KamresError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class FitFailure(KamresError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class PreconditionError(KamresError):
    pass


class AssumptionFailure(KamresError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class IntegrationFailure(KamresError):
    def __init__(self, message, worst=None):
        super().__init__(message)
        self.worst = worst


class ThresholdFailure(KamresError):
    def __init__(self, message, condition=None, slack=None):
        super().__init__(message)
        self.condition = condition
        self.slack = slack
