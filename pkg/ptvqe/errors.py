class PtvqeError(Exception):
    """Base class for every error raised by the toolkit."""


class FcidumpError(PtvqeError, ValueError):
    pass


class PartitionError(PtvqeError, ValueError):
    pass


class OperatorError(PtvqeError, ValueError):
    pass


class RegisterTooLargeError(PtvqeError):
    pass


class MissingRdmOrderError(PtvqeError):
    pass


class IntruderStateError(PtvqeError):
    pass


class OrthonormalizationError(PtvqeError):
    pass


class SymmetryError(PtvqeError, ValueError):
    pass


class ConfigError(PtvqeError, ValueError):
    pass
