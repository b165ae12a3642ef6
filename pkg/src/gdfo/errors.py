"""Exception hierarchy shared across the package."""


class GDFOError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(GDFOError, ValueError):
    pass


class ContractError(GDFOError, ValueError):
    """A caller violated an operation's precondition."""


class UsageError(GDFOError, RuntimeError):
    pass


class ConfigError(GDFOError, ValueError):
    pass


class NumericError(GDFOError, FloatingPointError):
    pass


class VocabularyError(GDFOError, IndexError):
    pass


class ProtocolError(GDFOError):
    """Out-of-order calls (CMA-ES ask/tell) or a malformed wire message."""


class BudgetError(GDFOError):
    """The black-box call budget is exhausted; nothing was evaluated."""


class ServiceError(GDFOError):
    pass


class PretrainError(GDFOError):
    pass


class SpecError(GDFOError, ValueError):
    """A task specification generates an unlearnable task."""


class CheckpointError(GDFOError, ValueError):
    pass


class FitnessWarning(UserWarning):
    """A non-finite fitness was replaced by the worst rank."""
