"""Day-ahead scheduling of fleet BEV charging/discharging on a radial feeder.

The package couples a backward/forward-sweep load flow, a TOU retail price
model with elastic demand, per-unit economic dispatch, and an NSGA-II search
over per-vehicle hourly charge/discharge actions.  Station benefit and
feeder loss cost are traded off as a two-objective front; owner cost,
carbon credits and battery wear enter the valuation layer.
"""

from .config import (
    SCENARIO_PRESETS,
    ConfigError,
    ScenarioConfig,
    build_network,
    build_tariff,
    default_config,
    load_config,
    make_scenario,
)
from .fleet import BevAgent, FleetConfig, build_fleet, plug_hours
from .grid import (
    DgUnit,
    FlowResult,
    NetworkModel,
    Station,
    net_injection,
    solve_series,
    sweep_load_flow,
    voltage_violations,
)
from .market import (
    ElasticityMatrix,
    TariffSchedule,
    adjust_prices,
    dispatch_hours,
    elastic_demand,
    label_periods,
    optimize_rho,
)
from .metrics import LoadIndices, load_indices, scenario_report
from .optimizer import (
    ParetoFront,
    ScenarioFlags,
    SchedulingProblem,
    build_problem,
    dumb_charging,
    evaluate_population,
    hypervolume,
    inner_dispatch,
    nsga2_run,
    select_weighted,
    water_filling_baseline,
)
from .valuation import (
    DegradationParams,
    ScheduleSolution,
    bev_cost,
    carbon_credit_cs,
    carbon_credit_ev,
    degradation_cost,
    evcs_benefit,
    soc_path,
    soc_step,
)
from .cli import RunResult, StageError, run_scenario, run_sweep

__version__ = "0.1.0"

__all__ = [
    "BevAgent",
    "ConfigError",
    "DegradationParams",
    "DgUnit",
    "ElasticityMatrix",
    "FleetConfig",
    "FlowResult",
    "LoadIndices",
    "NetworkModel",
    "ParetoFront",
    "RunResult",
    "SCENARIO_PRESETS",
    "ScenarioConfig",
    "ScenarioFlags",
    "ScheduleSolution",
    "SchedulingProblem",
    "StageError",
    "Station",
    "TariffSchedule",
    "adjust_prices",
    "bev_cost",
    "build_fleet",
    "build_network",
    "build_problem",
    "build_tariff",
    "carbon_credit_cs",
    "carbon_credit_ev",
    "default_config",
    "degradation_cost",
    "dispatch_hours",
    "dumb_charging",
    "elastic_demand",
    "evaluate_population",
    "evcs_benefit",
    "hypervolume",
    "inner_dispatch",
    "label_periods",
    "load_config",
    "load_indices",
    "make_scenario",
    "net_injection",
    "nsga2_run",
    "optimize_rho",
    "plug_hours",
    "run_scenario",
    "run_sweep",
    "scenario_report",
    "select_weighted",
    "soc_path",
    "soc_step",
    "solve_series",
    "sweep_load_flow",
    "voltage_violations",
    "water_filling_baseline",
]
