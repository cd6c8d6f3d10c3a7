"""Exception hierarchy shared by all modules."""


class HomogError(Exception):
    """Base class for every error raised by this package."""


class BadSpec(HomogError, ValueError):
    pass


class NonElliptic(HomogError, ValueError):
    pass


class NonFinite(HomogError, FloatingPointError):
    pass


class RejectionStall(HomogError, RuntimeError):
    pass


class BadEffective(HomogError, ValueError):
    pass


class NoConvergence(HomogError, RuntimeError):
    def __init__(self, message, iterations=None, residual=None, diagnostics=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
        self.diagnostics = diagnostics or {}


class MeanNotZero(HomogError, AssertionError):
    pass


class RouteMismatch(HomogError, RuntimeError):
    pass


class QuadratureFail(HomogError, RuntimeError):
    pass


class ConfigInvalid(HomogError, ValueError):
    pass


class IoFailure(HomogError, OSError):
    pass
