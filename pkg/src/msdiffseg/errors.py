"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes or extents are incompatible."""


class ContractError(ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(ValueError):
    """A configuration value is out of its admissible range."""


class NumericalError(ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""


class StepExhaustedError(RuntimeError):
    """A forward diffusion step was requested past the final step."""


class DataError(ValueError):
    """Dataset content is missing or inconsistent."""


class GenerationError(DataError):
    """The synthetic generator could not satisfy a dataset spec."""


class ParseError(DataError):
    """A file could not be decoded."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
