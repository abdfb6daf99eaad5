"""Exception types shared across salgrid."""


class SalgridError(Exception):
    """Base class for salgrid errors."""


class DimensionError(SalgridError, ValueError):
    """Operand shapes are incompatible."""


class TapeError(SalgridError, RuntimeError):
    """Backward pass requested without a matching forward record."""


class GradCheckError(SalgridError, AssertionError):
    """Analytic and numeric gradients disagree beyond tolerance."""


class DegenerateInputError(SalgridError, ValueError):
    """A metric or loss is undefined for the given input (e.g. a constant map)."""


class ConfigError(SalgridError, ValueError):
    """Invalid model or training configuration."""


class FormatError(SalgridError, ValueError):
    """Malformed file payload."""


class MagicMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class TrainingError(SalgridError, RuntimeError):
    """Training aborted, e.g. because a batch produced a degenerate loss."""
