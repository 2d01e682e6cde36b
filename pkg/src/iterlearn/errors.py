"""Exception hierarchy. Every error carries a short machine-readable ``reason``."""


class IterlearnError(Exception):
    reason = "error"


class ConfigError(IterlearnError, ValueError):
    reason = "config_error"


class NumericError(IterlearnError, ArithmeticError):
    reason = "numeric_error"

    def __init__(self, message, phase=None, step=None, checkpoint=None):
        ctx = []
        if phase is not None:
            ctx.append(f"phase={phase}")
        if step is not None:
            ctx.append(f"step={step}")
        if checkpoint is not None:
            ctx.append(f"last_checkpoint={checkpoint}")
        super().__init__(message + (f" ({', '.join(ctx)})" if ctx else ""))
        self.phase = phase
        self.step = step
        self.checkpoint = checkpoint


class SamplingError(IterlearnError, ValueError):
    reason = "sampling_error"


class DataError(IterlearnError, ValueError):
    reason = "data_error"


class NegativeMiningError(IterlearnError, ValueError):
    reason = "negative_mining_error"


class InvariantError(IterlearnError, RuntimeError):
    reason = "invariant_violation"


class CheckpointError(IterlearnError, OSError):
    reason = "checkpoint_error"
