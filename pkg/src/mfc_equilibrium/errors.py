"""Exception types shared by the solver, simulator and CLI."""


class ModelError(ValueError):
    """Malformed model input (shape mismatch, parse error, uncovered segment)."""


class ConditionsViolated(RuntimeError):
    """A well-posedness precondition failed before solving."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class IllConditioned(RuntimeError):
    """U(t;t) or W(t;t) lost positive-definiteness at time ``t``."""

    def __init__(self, t, block="U", min_eig=float("nan")):
        super().__init__(f"{block}(t;t) not positive definite at t={t:.6g} (min eig {min_eig:.3e})")
        self.t = float(t)
        self.block = block
        self.min_eig = float(min_eig)


class NotConverged(RuntimeError):
    """Picard iteration did not settle inside a backward window."""

    def __init__(self, window, change=float("nan"), stage="Lambda"):
        super().__init__(f"{stage}: fixed point not converged in window {window} (last change {change:.3e})")
        self.window = window
        self.change = float(change)
        self.stage = stage


class SimulationDiverged(RuntimeError):
    """A particle state became NaN or infinite."""

    def __init__(self, step):
        super().__init__(f"non-finite state at step {step}")
        self.step = int(step)


class DomainViolation(RuntimeError):
    """State left the admissible domain (e.g. non-positive wealth)."""
