"""Exception hierarchy shared by the pricing modules and the CLI."""


class DelayHedgeError(Exception):
    """Base class for all package errors."""


class ConfigError(DelayHedgeError, ValueError):
    """Invalid model, payoff or experiment configuration."""


class PayoffError(ConfigError):
    """Payoff not admissible for the requested computation."""


class CapacityError(DelayHedgeError):
    """Problem size exceeds a configured budget."""

    def __init__(self, message: str, limit: int | None = None):
        super().__init__(message)
        self.limit = limit


class NumericalError(DelayHedgeError):
    """A numerical routine failed or produced an inconsistent result."""


class IterationLimitError(NumericalError):
    """Simplex iteration cap exceeded."""


class InfeasibleConstructionError(NumericalError):
    """A constructed up-probability left the open unit interval."""
