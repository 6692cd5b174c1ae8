"""Exception hierarchy shared by all engines."""


class RslError(Exception):
    """Base class for every error raised by the package."""


class ParamOutOfBox(RslError):
    pass


class NonPsdDiffusion(RslError):
    pass


class BadFamilyParams(RslError):
    pass


class ConfigError(RslError):
    """Malformed model or experiment configuration; carries the offending key path."""

    def __init__(self, message, key_path=""):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}" if key_path else message)


class MprInfeasible(RslError):
    def __init__(self, message, witness=None):
        self.witness = witness
        super().__init__(message)


class NumericOverflow(RslError):
    pass


class PreconditionNotCertified(RslError):
    pass


class GridTooCoarse(RslError):
    pass


class NotApplicable(RslError):
    pass


class LogDensityGridExceeded(RslError):
    pass


class SuperhedgeViolation(RslError):
    def __init__(self, message, path=None):
        self.path = path
        super().__init__(message)


class DomainError(RslError):
    pass


class DomainMismatch(RslError):
    pass
