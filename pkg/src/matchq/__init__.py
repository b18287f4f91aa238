"""matchq: near-optimal adaptive matching policies for queueing systems with abandonment."""

from .errors import (
    InfeasibleTarget,
    InvalidInstance,
    MatchqError,
    SizeBudgetExceeded,
    SolverFailure,
)
from .instance import Accuracy, Instance, Target, load_instance, rescale_abandonment

__all__ = [
    "Accuracy",
    "Instance",
    "Target",
    "load_instance",
    "rescale_abandonment",
    "MatchqError",
    "InvalidInstance",
    "InfeasibleTarget",
    "SolverFailure",
    "SizeBudgetExceeded",
]

__version__ = "0.1.0"
