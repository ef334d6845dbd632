"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration violates its invariants."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


class NumericError(FloatingPointError):
    """A forward computation produced NaN or Inf from finite inputs."""


class CapabilityError(RuntimeError):
    """The requested feature is not available for this attention kind."""


class ParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the expected model."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, lr: float, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step} (lr={lr:.6g})")
        self.step = step
        self.lr = lr
        self.loss = loss
