"""Exception hierarchy; the CLI maps each family to an exit status."""


class SpinampError(Exception):
    pass


class ConfigError(SpinampError, ValueError):
    """Invalid scenario/config input.  ``path`` names the offending field."""

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class NumericalError(SpinampError, ArithmeticError):
    pass


class StepSizeError(NumericalError):
    pass


class CalibrationError(NumericalError):
    pass
