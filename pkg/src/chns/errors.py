class ConfigError(ValueError):
    """Invalid configuration value; ``key`` names the offending entry when known."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class SingularMatrixError(ArithmeticError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class NewtonConvergenceError(RuntimeError):
    """Newton iteration hit ``max_iterations``; carries the last iterate and history."""

    def __init__(self, message, iterate=None, history=None):
        super().__init__(message)
        self.iterate = iterate
        self.history = history or []


class SimulationAborted(RuntimeError):
    """Raised by the time loop when a step fails; ``trajectory`` holds the steps done so far."""

    def __init__(self, message, trajectory=None, cause=None):
        super().__init__(message)
        self.trajectory = trajectory
        self.cause = cause
