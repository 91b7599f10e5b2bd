"""Density-aware reachability and risk-bounded planning for closed-loop vehicles."""

from .dynamics import CAR, HOVERCRAFT, ClosedLoop, ControllerGains, LinearSystem
from .errors import (
    ConfigError,
    DensPlanError,
    EmptySupport,
    GenerationExhausted,
    HorizonExceeded,
    Infeasible,
    PlanFailed,
)
from .planner import PlannerConfig, plan
from .probest import Obstacle, OraclePredictor, total_risk
from .scenario import Scenario, car_template, hovercraft_template
from .trajopt import solve_nlp

__version__ = "0.1.0"
