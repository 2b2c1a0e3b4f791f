"""Multi-objective policy optimization with trade-offs applied at distillation."""

from .core import (
    ContractError,
    FeatureMap,
    GaussianPolicy,
    NumericalError,
    RngStream,
    TradeOff,
    TradeOffDistribution,
)
from .improvement import ImprovementConfig
from .projection import (
    MethodConfig,
    ProjectionConfig,
    distill,
    distill_conditioned,
    em_iterate,
)
from .testbeds import BanditTask, ChainMDP

__all__ = [
    "BanditTask",
    "ChainMDP",
    "ContractError",
    "FeatureMap",
    "GaussianPolicy",
    "ImprovementConfig",
    "MethodConfig",
    "NumericalError",
    "ProjectionConfig",
    "RngStream",
    "TradeOff",
    "TradeOffDistribution",
    "distill",
    "distill_conditioned",
    "em_iterate",
]
