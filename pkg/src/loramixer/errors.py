"""Exception hierarchy shared across the engine."""


class LoraMixerError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(LoraMixerError, ValueError):
    pass


class NonFiniteError(LoraMixerError, FloatingPointError):
    """An operation produced NaN/Inf, or a finite-difference probe did."""


class ConfigurationError(LoraMixerError, ValueError):
    pass


class RoutingError(LoraMixerError, ValueError):
    pass


class StatisticsError(LoraMixerError, ValueError):
    pass


class DomainError(LoraMixerError, ValueError):
    """Input outside the mathematical domain of a function (e.g. off the simplex)."""


class LabelError(LoraMixerError, ValueError):
    pass


class AnchorError(LoraMixerError):
    """Preservation anchor missing or incomplete."""


class DivergenceError(LoraMixerError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class SpecError(LoraMixerError, ValueError):
    """Invalid synthetic-domain specification."""


class StreamError(LoraMixerError, ValueError):
    pass


class EvaluationError(LoraMixerError):
    pass


class FormatError(LoraMixerError, ValueError):
    """Malformed adapter manifest or checkpoint."""


class IntegrityError(LoraMixerError):
    """Checksum mismatch on a stored tensor blob."""


class ExportError(LoraMixerError):
    pass


class CompositionError(LoraMixerError):
    pass
