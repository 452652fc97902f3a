"""Super-replication under delayed information.

Exact binomial prices with a trading delay (``superhedge``), the scaling
limit with volatility interval [0, sigma sqrt(H + 1)] (``gexp``), the
concave-envelope price for a constant delay (``envelope``) and explicit
feasible pricing measures (``dualconstruct``).
"""

from .errors import (
    CapacityError,
    ConfigError,
    DelayHedgeError,
    InfeasibleConstructionError,
    IterationLimitError,
    NumericalError,
    PayoffError,
)
from .model import ModelSpec, PayoffSpec

__all__ = [
    "CapacityError",
    "ConfigError",
    "DelayHedgeError",
    "InfeasibleConstructionError",
    "IterationLimitError",
    "ModelSpec",
    "NumericalError",
    "PayoffError",
    "PayoffSpec",
]
