"""
Exception types shared across the lab
"""


class GpcError(Exception):
    """Base class for all errors raised by this package"""


class ContractViolation(GpcError, ValueError):
    """A shape or range precondition was not met by the caller"""


class EnvironmentDiverged(GpcError, ArithmeticError):
    """Simulation produced a non-finite state"""


class NoValidRollout(GpcError, RuntimeError):
    """Every rollout in a batch diverged, so no weights can be formed"""


class TrainingDiverged(GpcError, ArithmeticError):
    """Non-finite loss or gradient during flow fitting"""


class ConfigError(GpcError, ValueError):
    """Invalid run configuration"""

    def __init__(self, message: str, line: int = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(GpcError, ValueError):
    """Checkpoint cannot be used (bad hash, version or environment)"""
