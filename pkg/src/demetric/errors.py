"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DegenerateVectorError(ValueError):
    """A vector that must be normalizable has (near-)zero norm."""


class MissingGradientError(RuntimeError):
    """An optimizer step was requested before gradients were populated."""


class InsufficientBranchesError(ValueError):
    """The adversary loss needs at least two branch embeddings."""


class InvalidBatchError(ValueError):
    """A batch lacks the positive/negative pair structure the loss needs."""


class DatasetError(ValueError):
    """The dataset cannot satisfy the requested sampling parameters."""


class SplitContaminationError(ValueError):
    """Seen and unseen class sets overlap."""


class SplitDesignError(ValueError):
    """A zero-shot split violates its construction properties."""


class FormatError(ValueError):
    """An image file is malformed; the message carries the byte offset."""


class ConfigError(ValueError):
    """A configuration file contains unknown keys or bad values."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class ParameterError(ValueError):
    """A function argument is outside its valid range."""
