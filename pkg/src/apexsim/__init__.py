"""apexsim: lateral-control simulation toolkit for high-speed autonomous racing."""

from apexsim.vehicle import (
    ConditioningError,
    DiscreteModel,
    LinearModel,
    PacejkaParams,
    VehicleParams,
    VehicleState,
    critical_speed,
    derivatives,
    discretize_zoh,
    integrate_step,
    linearize,
    tire_lateral_mu,
)

__all__ = [
    "ConditioningError",
    "DiscreteModel",
    "LinearModel",
    "PacejkaParams",
    "VehicleParams",
    "VehicleState",
    "critical_speed",
    "derivatives",
    "discretize_zoh",
    "integrate_step",
    "linearize",
    "tire_lateral_mu",
]
