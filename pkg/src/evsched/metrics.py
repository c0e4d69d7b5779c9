"""Load-profile quality indices and scenario comparison reporting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .valuation import ScheduleSolution


@dataclass(frozen=True)
class LoadIndices:
    """Daily curve quality: all three are percentages.

    load_factor = 100 * mean / peak; peak_to_valley = 100 * (peak - min) /
    peak; peak_compensation = 100 * (reference peak - peak) / reference peak,
    negative when scheduling worsens the peak.
    """

    load_factor: float
    peak_to_valley: float
    peak_compensation: Optional[float] = None


def load_indices(
    total_kw: Sequence[float],
    base_kw: Optional[Sequence[float]] = None,
) -> LoadIndices:
    total = np.asarray(total_kw, dtype=float)
    if total.size == 0 or np.any(total <= 0):
        raise ValueError("load series must be strictly positive")
    peak = float(total.max())
    lf = 100.0 * float(total.mean()) / peak
    p2v = 100.0 * (peak - float(total.min())) / peak
    pc = None
    if base_kw is not None:
        base = np.asarray(base_kw, dtype=float)
        if np.any(base <= 0):
            raise ValueError("reference series must be strictly positive")
        ref_peak = float(base.max())
        pc = 100.0 * (ref_peak - peak) / ref_peak
    return LoadIndices(lf, p2v, pc)


# column order for the scenario comparison table; one row per scenario
REPORT_FIELDS = (
    "scenario",
    "v2g",
    "bdc",
    "res",
    "oep",
    "erq",
    "f1_selected",
    "f1_min",
    "f1_max",
    "f2_selected",
    "f2_min",
    "f2_max",
    "losses_kwh",
    "load_factor",
    "peak_to_valley",
    "peak_compensation",
    "v_min_pu",
    "bev_cost_total",
    "v2g_energy_kwh",
    "charge_energy_kwh",
    "carbon_kg_ev",
    "carbon_kg_cs",
    "carbon_revenue",
    "degradation_total",
    "rho_star",
    "front_size",
    "degraded",
)


def fleet_load_kw(solution: ScheduleSolution) -> np.ndarray:
    """Hourly net fleet draw: charging minus discharging, [T]."""
    return solution.p_charge_kw.sum(axis=0) - solution.p_discharge_kw.sum(axis=0)


def scenario_report(
    name: str,
    flags,
    front_f1: Sequence[float],
    front_f2: Sequence[float],
    selected: ScheduleSolution,
    base_total_kw: Sequence[float],
    rho_star: Optional[float] = None,
    degraded: bool = False,
) -> dict:
    """One comparison-table row for a solved scenario."""
    base = np.asarray(base_total_kw, dtype=float)
    total = base + fleet_load_kw(selected)
    idx = load_indices(total, base)
    f1s = np.asarray(front_f1, dtype=float)
    f2s = np.asarray(front_f2, dtype=float)
    row = {
        "scenario": name,
        "v2g": flags.v2g,
        "bdc": flags.bdc,
        "res": flags.res,
        "oep": flags.oep,
        "erq": flags.erq,
        "f1_selected": selected.f1,
        "f1_min": float(f1s.min()),
        "f1_max": float(f1s.max()),
        "f2_selected": selected.f2,
        "f2_min": float(f2s.min()),
        "f2_max": float(f2s.max()),
        "losses_kwh": float(selected.losses_kwh.sum()),
        "load_factor": idx.load_factor,
        "peak_to_valley": idx.peak_to_valley,
        "peak_compensation": idx.peak_compensation,
        "v_min_pu": float(selected.voltages.min()) if selected.voltages is not None else None,
        "bev_cost_total": float(selected.bev_cost.sum()),
        "v2g_energy_kwh": selected.v2g_energy_kwh,
        "charge_energy_kwh": selected.charge_energy_kwh,
        "carbon_kg_ev": selected.carbon_kg_ev,
        "carbon_kg_cs": selected.carbon_kg_cs,
        "carbon_revenue": selected.carbon_revenue_ev + selected.carbon_revenue_cs,
        "degradation_total": selected.degradation_total,
        "rho_star": rho_star,
        "front_size": len(f1s),
        "degraded": degraded,
    }
    return row
