"""Exception hierarchy shared by the simulator, learner and relay harness."""


class MgProtectError(Exception):
    """Base class. ``exit_code`` is what the command line returns for it."""

    exit_code = 1


class ConfigurationError(MgProtectError, ValueError):
    exit_code = 3


class TopologyError(ConfigurationError):
    exit_code = 3


class SimulationError(MgProtectError, RuntimeError):
    exit_code = 4


class NumericalError(SimulationError):
    exit_code = 4


class ModelError(MgProtectError, ValueError):
    """Bad model file, arity mismatch or tree/feature-set mismatch."""

    exit_code = 5


class DataError(MgProtectError, ValueError):
    exit_code = 6


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ProvenanceError(DataError):
    pass
