"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where finite numbers are required."""


class ConfigError(ValueError):
    pass


class DataFormatError(ValueError):
    """A tensor, manifest or checkpoint file is malformed."""


class GenerationError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class DataError(ValueError):
    """A batch lacks the modalities the model variant needs."""
