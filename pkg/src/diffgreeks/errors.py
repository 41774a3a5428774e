"""Exception types shared across the pricing engines."""


class DiffgreeksError(Exception):
    """Base class for all library errors."""


class FactorizationError(DiffgreeksError):
    """Correlation matrix is not positive semi-definite."""


class DimensionError(DiffgreeksError):
    """Input dimensions do not match the option contract."""


class DegenerateVolError(DiffgreeksError):
    """Effective volatility is zero; the closed form is singular."""


class ScoreContextError(DiffgreeksError):
    """Likelihood-ratio score is undefined (zero volatility)."""


class StabilityError(DiffgreeksError):
    """Explicit time step violates the parabolic stability bound."""


class BoundaryError(DiffgreeksError):
    """Grid node has no interior neighbours for the requested stencil."""


class UnsupportedActivationError(DiffgreeksError):
    """Activation lacks the smoothness the requested derivative needs."""


class DivergenceError(DiffgreeksError):
    """Training loss became non-finite."""


class ZeroReferenceError(DiffgreeksError):
    """Relative error is undefined against a zero reference value."""


class ConfigError(DiffgreeksError):
    """Experiment configuration failed validation."""


class UsageError(DiffgreeksError):
    """Unknown benchmark suite or other bad invocation."""
