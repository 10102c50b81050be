"""loadsteer: price-signal coordination of residential appliance load.

A coordinator announces a per-slot electricity price; each simulated home
re-optimizes its appliance schedules against comfort penalties; the
coordinator differentiates through the homes' optimality conditions to
steer the aggregate load toward a target profile.
"""

from ._kernel import BACKEND as KERNEL_BACKEND
from .appliances import (
    BasicApplianceSpec,
    ConstraintBlock,
    ConstraintPolyhedron,
    EvSpec,
    EwhSpec,
    HvacSpec,
    InfeasibleSpecError,
    assemble_home_polyhedron,
    build_basic_block,
    build_ev_block,
    build_ewh_block,
    build_hvac_block,
    ev_charge_trajectory,
    ewh_tank_trajectory,
    hvac_temperature_trajectory,
)
from .qp import (
    HomeQpSolver,
    KktResiduals,
    PrimalDualSolution,
    QpSettings,
    SolverError,
    home_objective,
    kkt_residuals,
    solve_home_qp,
    solve_qp,
)
from .sensitivity import (
    ActiveSetInfo,
    SingularSystemError,
    active_set,
    home_gradient_contribution,
    price_jacobian,
)
from .scenario import (
    HomeData,
    NeighborhoodConfig,
    Scenario,
    ScenarioGenerationError,
    TargetProfile,
    feasibility_certify,
    generate_neighborhood,
    load_scenario,
    save_scenario,
)
from .coordinator import (
    CoordinationError,
    CoordinatorConfig,
    PriceBox,
    RunResult,
    run_coordination,
)

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "HvacSpec",
    "EwhSpec",
    "EvSpec",
    "BasicApplianceSpec",
    "ConstraintBlock",
    "ConstraintPolyhedron",
    "InfeasibleSpecError",
    "build_hvac_block",
    "build_ewh_block",
    "build_ev_block",
    "build_basic_block",
    "assemble_home_polyhedron",
    "hvac_temperature_trajectory",
    "ewh_tank_trajectory",
    "ev_charge_trajectory",
    "QpSettings",
    "KktResiduals",
    "PrimalDualSolution",
    "SolverError",
    "HomeQpSolver",
    "solve_qp",
    "solve_home_qp",
    "home_objective",
    "kkt_residuals",
    "ActiveSetInfo",
    "SingularSystemError",
    "active_set",
    "price_jacobian",
    "home_gradient_contribution",
    "NeighborhoodConfig",
    "TargetProfile",
    "HomeData",
    "Scenario",
    "ScenarioGenerationError",
    "generate_neighborhood",
    "feasibility_certify",
    "save_scenario",
    "load_scenario",
    "PriceBox",
    "CoordinatorConfig",
    "RunResult",
    "CoordinationError",
    "run_coordination",
]
