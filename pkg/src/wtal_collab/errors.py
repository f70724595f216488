"""Exception classes shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A NaN or infinite value reached a place that cannot accept it."""


class ParameterError(ValueError):
    """An argument is outside its admissible range."""


class FormatError(ValueError):
    """A binary file does not follow its declared layout."""


class LoadError(ValueError):
    """A manifest or the data it references failed validation."""


class GenerationError(RuntimeError):
    """A synthetic dataset could not be generated from the given spec."""


class TrainingError(RuntimeError):
    """Optimization diverged or produced a non-finite loss."""


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""
