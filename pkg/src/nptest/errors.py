"""Exception hierarchy shared by the library and the command line."""


class NPTestError(Exception):
    """Base class for all errors raised by nptest."""


class InvalidArgumentError(NPTestError, ValueError):
    pass


class DegenerateDesignError(NPTestError):
    """The design does not identify the requested fit (e.g. singular Gram)."""


class DegeneratePenaltyError(NPTestError):
    pass


class IllPosedError(NPTestError):
    pass


class NoFeasibleBandwidthError(NPTestError):
    pass


class NoSolutionError(NPTestError):
    def __init__(self, message, bracket=None):
        super().__init__(message)
        self.bracket = bracket


class OutOfRangeError(NPTestError):
    pass
