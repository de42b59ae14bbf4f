"""Exception hierarchy shared by every module.

CLI exit codes hang off these classes (see ``stslab.cli``).
"""


class StsError(Exception):
    """Base class for all library errors."""


class NumericalInputError(StsError, ValueError):
    pass


class ShapeError(StsError, ValueError):
    pass


class IllConditionedGramError(StsError, ArithmeticError):
    pass


class InvalidSubsetEncodingError(StsError, ValueError):
    pass


class PeSamplingFailedError(StsError, RuntimeError):
    """Rejection sampling ran out of attempts.

    ``trace`` is attached by the trainer when the failure interrupts a run.
    """

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


class DivergenceError(StsError, FloatingPointError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


class NotApplicableError(StsError, ValueError):
    """A theorem's precondition (e.g. a width limit) does not hold."""


class ConfigError(StsError, ValueError):
    pass
