"""Battery state dynamics and the money side: owner cost, station benefit,
carbon credits and cycling degradation.

Sign conventions: charge and discharge powers are both non-negative, the
action matrix (+1 charge, -1 discharge, 0 idle) keeps the two mutually
exclusive.  Charging multiplies by the charger efficiency on the way into
the battery; by default discharging mirrors that form (soc -= eta_d*P/E_b).
strict_energy_accounting=True switches the discharge term to P/(eta_d*E_b),
i.e. the battery drains more than the grid receives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class DegradationParams:
    cell_price: float = 150.0      # replacement cost per kWh of pack
    labor_price: float = 300.0     # fixed swap cost per pack
    cycle_life: float = 3000.0     # full equivalent cycles
    dod: float = 0.8               # rated depth of discharge per cycle


def soc_step(
    soc: float,
    p_charge_kw: float,
    p_discharge_kw: float,
    capacity_kwh: float,
    eta_charge: float = 0.9,
    eta_discharge: float = 0.9,
    dt_h: float = 1.0,
    strict_energy_accounting: bool = False,
) -> float:
    """Advance the state of charge by one interval."""
    if p_charge_kw < 0 or p_discharge_kw < 0:
        raise ValueError("charge and discharge powers must be non-negative")
    if p_charge_kw > 0 and p_discharge_kw > 0:
        raise ValueError("charge and discharge are mutually exclusive")
    gain = eta_charge * p_charge_kw * dt_h / capacity_kwh
    if strict_energy_accounting:
        drop = p_discharge_kw * dt_h / (eta_discharge * capacity_kwh)
    else:
        drop = eta_discharge * p_discharge_kw * dt_h / capacity_kwh
    return soc + gain - drop


def soc_path(
    soc0: np.ndarray,
    p_charge_kw: np.ndarray,
    p_discharge_kw: np.ndarray,
    capacity_kwh: np.ndarray,
    eta_charge: float = 0.9,
    eta_discharge: float = 0.9,
    dt_h: float = 1.0,
    strict_energy_accounting: bool = False,
) -> np.ndarray:
    """Vectorised trajectory: soc[:, k] before slot k, one extra final column.

    Powers are [n, K] in the battery's own slot order (the plug window,
    wrapped across midnight); the result is [n, K+1].
    """
    pc = np.atleast_2d(p_charge_kw)
    pd = np.atleast_2d(p_discharge_kw)
    cap = np.atleast_1d(capacity_kwh)[:, None]
    gain = eta_charge * pc * dt_h / cap
    if strict_energy_accounting:
        drop = pd * dt_h / (eta_discharge * cap)
    else:
        drop = eta_discharge * pd * dt_h / cap
    steps = np.cumsum(gain - drop, axis=1)
    out = np.empty((pc.shape[0], pc.shape[1] + 1))
    out[:, 0] = np.atleast_1d(soc0)
    out[:, 1:] = out[:, [0]] + steps
    return out


def carbon_credit_ev(
    discharged_kwh: np.ndarray,
    e_gas: float = 0.9,
    emission_price: float = 0.12,
) -> tuple[np.ndarray, np.ndarray]:
    """Avoided emissions and revenue for V2G energy, elementwise.

    Every discharged kWh displaces e_gas kg of CO2 from gas-fired peaking
    generation; credits pay emission_price per kg.
    """
    kg = np.asarray(discharged_kwh, dtype=float) * e_gas
    return kg, kg * emission_price


def carbon_credit_cs(
    pv_kwh: float,
    e_th: float = 0.9,
    emission_price: float = 0.12,
) -> tuple[float, float]:
    """Avoided emissions and revenue for station PV generation."""
    kg = float(pv_kwh) * e_th
    return kg, kg * emission_price


def degradation_cost(
    discharged_kwh: np.ndarray,
    capacity_kwh: np.ndarray,
    params: DegradationParams = DegradationParams(),
) -> np.ndarray:
    """Cycling wear cost, linear in discharged energy.

    Pro-rates the pack replacement (cell price times capacity plus labor)
    over the lifetime discharge throughput: cycle life * capacity * DOD.
    """
    d = np.asarray(discharged_kwh, dtype=float)
    cap = np.asarray(capacity_kwh, dtype=float)
    pack = params.cell_price * cap + params.labor_price
    return pack * d / (params.cycle_life * cap * params.dod)


def bev_cost(
    p_charge_kw: np.ndarray,
    p_discharge_kw: np.ndarray,
    price_charge: np.ndarray,
    price_discharge: Optional[np.ndarray] = None,
    eta_charge: float = 0.9,
    eta_discharge: float = 0.9,
    carbon_revenue: float | np.ndarray = 0.0,
    degradation: float | np.ndarray = 0.0,
    dt_h: float = 1.0,
) -> np.ndarray:
    """Daily cost per BEV owner: energy bought minus energy sold back,
    minus carbon credits, plus cycling wear.

    Power arrays are [n, T] against hourly prices [T]; returns [n].
    """
    pc = np.atleast_2d(p_charge_kw)
    pd = np.atleast_2d(p_discharge_kw)
    lam_c = np.asarray(price_charge, dtype=float)
    lam_d = lam_c if price_discharge is None else np.asarray(price_discharge, dtype=float)
    buy = (pc * lam_c[None, :]).sum(axis=1) * eta_charge * dt_h
    sell = (pd * lam_d[None, :]).sum(axis=1) * eta_discharge * dt_h
    return buy - sell - np.asarray(carbon_revenue, dtype=float) + np.asarray(
        degradation, dtype=float
    )


def evcs_benefit(
    p_charge_kw: np.ndarray,
    p_discharge_kw: np.ndarray,
    price_charge: np.ndarray,
    price_discharge: Optional[np.ndarray] = None,
    carbon_revenue_cs: float = 0.0,
    dt_h: float = 1.0,
) -> float:
    """Aggregate station operator benefit f1.

    Revenue from energy sold to charging BEVs, plus any PV carbon credits,
    minus payments for energy bought back from discharging BEVs.
    """
    pc = np.atleast_2d(p_charge_kw)
    pd = np.atleast_2d(p_discharge_kw)
    lam_c = np.asarray(price_charge, dtype=float)
    lam_d = lam_c if price_discharge is None else np.asarray(price_discharge, dtype=float)
    revenue = float((pc.sum(axis=0) * lam_c).sum()) * dt_h
    buyback = float((pd.sum(axis=0) * lam_d).sum()) * dt_h
    return revenue - buyback + carbon_revenue_cs


def station_balance_residual(
    p_charge_kw: np.ndarray,
    p_grid_kw: np.ndarray,
    p_dg_kw: np.ndarray,
    p_discharge_kw: np.ndarray,
    p_pv_kw: np.ndarray,
) -> np.ndarray:
    """Hourly imbalance of the station energy ledger.

    Charging demand must be covered by grid import, DG output, discharging
    BEVs and PV; the residual should sit at numerical zero.
    """
    return (
        np.asarray(p_charge_kw, dtype=float)
        - np.asarray(p_grid_kw, dtype=float)
        - np.asarray(p_dg_kw, dtype=float)
        - np.asarray(p_discharge_kw, dtype=float)
        - np.asarray(p_pv_kw, dtype=float)
    )


@dataclass
class ScheduleSolution:
    """A complete fleet schedule with its evaluated economics and grid state."""

    actions: np.ndarray             # int8 [n, T]; +1 charge, -1 discharge, 0 idle
    p_charge_kw: np.ndarray         # [n, T], >= 0
    p_discharge_kw: np.ndarray      # [n, T], >= 0
    soc: np.ndarray                 # [n, K+1] along each agent's slot order
    soc_hour: np.ndarray            # [n, T] post-action SOC projected to grid hours
    f1: float = 0.0                 # station benefit ($/day)
    f2: float = 0.0                 # loss cost ($/day)
    bev_cost: np.ndarray = field(default_factory=lambda: np.zeros(0))
    losses_kwh: np.ndarray = field(default_factory=lambda: np.zeros(0))
    voltages: Optional[np.ndarray] = None      # [T, n_bus] magnitudes
    dg_kw: Optional[np.ndarray] = None         # [T, n_units]
    grid_kw: Optional[np.ndarray] = None       # [T]
    pv_kwh: float = 0.0
    carbon_kg_ev: float = 0.0
    carbon_kg_cs: float = 0.0
    carbon_revenue_ev: float = 0.0
    carbon_revenue_cs: float = 0.0
    degradation_total: float = 0.0
    violations: list = field(default_factory=list)
    balance_residual_kw: float = 0.0

    @property
    def feasible(self) -> bool:
        return not self.violations

    @property
    def violation_sum(self) -> float:
        return float(sum(v.get("magnitude", 0.0) for v in self.violations))

    @property
    def v2g_energy_kwh(self) -> float:
        return float(self.p_discharge_kw.sum())

    @property
    def charge_energy_kwh(self) -> float:
        return float(self.p_charge_kw.sum())
