"""Fleet schedule optimisation: NSGA-II over charge/discharge chromosomes.

A chromosome holds one action gene (charge / discharge / idle) and one power
fraction gene per BEV per plug-in hour.  Decoding runs a repair pass that
clips powers to the SOC window and tops up charging until the departure
target is met, so every evaluated schedule is physically consistent.  The
two objectives are station operator benefit (maximised) and the cost of
feeder losses (minimised); selection uses constrained non-dominated sorting
with crowding distance and an external archive keeps every non-dominated
feasible solution found.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import valuation
from .fleet import BevAgent, plug_hours
from .grid import NetworkModel, net_injection, solve_series, voltage_violations
from .market import TariffSchedule, dispatch_hours
from .valuation import DegradationParams, ScheduleSolution

_EPS_KW = 1e-9


@dataclass(frozen=True)
class ScenarioFlags:
    """Feature switches: V2G discharge, battery degradation compensation,
    station PV, incentive-spread pricing, carbon credits."""

    v2g: bool = False
    bdc: bool = False
    res: bool = False
    oep: bool = False
    erq: bool = False


@dataclass
class SchedulingProblem:
    """Everything the optimiser needs to score a fleet schedule."""

    net: NetworkModel
    tariff: TariffSchedule
    flags: ScenarioFlags
    agents: list[BevAgent]
    slot_hour: np.ndarray          # [n, K] grid hour per slot, -1 padding
    slot_mask: np.ndarray          # [n, K] bool
    n_slots: np.ndarray            # [n]
    capacity: np.ndarray           # [n] kWh
    p_max: np.ndarray              # [n] kW
    soc_init: np.ndarray           # [n]
    target: np.ndarray             # [n] departure SOC requirement (achievable)
    target_reduced: np.ndarray     # [n] bool, True when the raw requirement was cut
    station_bus: np.ndarray        # [n] bus index into the network arrays
    base_p_kw: np.ndarray          # [T, n_bus]
    base_q_kvar: np.ndarray        # [T, n_bus]
    pv_kw: np.ndarray              # [T, n_bus]
    eta_charge: float = 0.9
    eta_discharge: float = 0.9
    soc_min: float = 0.05
    soc_max: float = 0.95
    reserve: float = 0.10
    strict_energy_accounting: bool = False
    pi_loss: float = 1.0
    emission_price: float = 0.12
    e_gas: float = 0.9
    e_th: float = 0.9
    degradation: DegradationParams = field(default_factory=DegradationParams)
    grid_cap_kw: Optional[float] = None
    power_levels: Optional[np.ndarray] = None   # quantised power fractions
    dt_h: float = 1.0

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def horizon(self) -> int:
        return self.base_p_kw.shape[0]

    @property
    def num_genes(self) -> int:
        return 2 * int(self.n_slots.sum())

    def discharge_soc_per_kwh(self) -> float:
        """SOC drop per delivered kWh, times capacity."""
        if self.strict_energy_accounting:
            return 1.0 / self.eta_discharge
        return self.eta_discharge


def build_problem(
    agents: Sequence[BevAgent],
    net: NetworkModel,
    tariff: TariffSchedule,
    flags: ScenarioFlags,
    pv_kw: Optional[np.ndarray] = None,
    eta_charge: float = 0.9,
    eta_discharge: float = 0.9,
    soc_min: float = 0.05,
    soc_max: float = 0.95,
    reserve: float = 0.10,
    strict_energy_accounting: bool = False,
    pi_loss: float = 1.0,
    emission_price: float = 0.12,
    e_gas: float = 0.9,
    e_th: float = 0.9,
    degradation: DegradationParams = DegradationParams(),
    grid_cap_kw: Optional[float] = None,
    power_levels: Optional[Sequence[float]] = None,
    horizon: int = 24,
) -> SchedulingProblem:
    """Assemble the scheduling problem for the assigned (non-rejected) fleet."""
    active = [a for a in agents if a.station is not None]
    n = len(active)
    windows = [plug_hours(a.behavior.t_back, a.behavior.t_out, horizon) for a in active]
    K = max((len(w) for w in windows), default=1)
    slot_hour = np.full((n, K), -1, dtype=int)
    slot_mask = np.zeros((n, K), dtype=bool)
    for i, w in enumerate(windows):
        slot_hour[i, : len(w)] = w
        slot_mask[i, : len(w)] = True

    base_p, base_q = net.hourly_loads()
    if base_p.shape[0] != horizon:
        raise ValueError("network load shape does not match the horizon")
    pv = np.zeros_like(base_p) if pv_kw is None else np.asarray(pv_kw, dtype=float)

    prob = SchedulingProblem(
        net=net,
        tariff=tariff,
        flags=flags,
        agents=list(active),
        slot_hour=slot_hour,
        slot_mask=slot_mask,
        n_slots=slot_mask.sum(axis=1),
        capacity=np.array([a.capacity_kwh for a in active]),
        p_max=np.array([a.max_power_kw for a in active]),
        soc_init=np.array([a.behavior.soc_initial for a in active]),
        target=np.zeros(n),
        target_reduced=np.zeros(n, dtype=bool),
        station_bus=np.array([net.index(a.station) for a in active], dtype=int),
        base_p_kw=base_p,
        base_q_kvar=base_q,
        pv_kw=pv,
        eta_charge=eta_charge,
        eta_discharge=eta_discharge,
        soc_min=soc_min,
        soc_max=soc_max,
        reserve=reserve,
        strict_energy_accounting=strict_energy_accounting,
        pi_loss=pi_loss,
        emission_price=emission_price,
        e_gas=e_gas,
        e_th=e_th,
        degradation=degradation,
        grid_cap_kw=grid_cap_kw,
        power_levels=None if power_levels is None else np.sort(np.asarray(power_levels, float)),
    )

    # departure requirement: trip energy plus a reserve margin, capped at the
    # window ceiling; cut to whatever full-power charging can actually reach
    desired = np.minimum(
        np.array([a.trip_energy_kwh for a in active]) / prob.capacity + reserve,
        soc_max,
    )
    full_A = np.ones((1, n, K), dtype=np.int8)
    full_W = np.ones((1, n, K))
    _, pc, _, soc = _clip_batch(prob, full_A, full_W)
    reachable = soc[0, :, -1]
    prob.target = np.minimum(desired, reachable)
    prob.target_reduced = desired > reachable + 1e-12
    return prob


# -- repair ----------------------------------------------------------------


def _quantize(prob: SchedulingProblem, W: np.ndarray) -> np.ndarray:
    levels = prob.power_levels
    idx = np.searchsorted(levels, W - 1e-12)
    idx = np.clip(idx, 0, len(levels) - 1)
    lower = np.clip(idx - 1, 0, len(levels) - 1)
    pick_lower = np.abs(W - levels[lower]) <= np.abs(levels[idx] - W)
    return np.where(pick_lower, levels[lower], levels[idx])


def _clip_batch(
    prob: SchedulingProblem, A: np.ndarray, W: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Clip a batch of chromosomes to the SOC window.

    A is int8 [m, n, K], W in [0, 1].  Returns actions, charge and discharge
    power per slot, and the SOC path [m, n, K+1].  Rows are independent, so
    results do not depend on batch composition.
    """
    m, n, K = A.shape
    mask = prob.slot_mask[None, :, :]
    A = np.where(mask, A, 0).astype(np.int8)
    if not prob.flags.v2g:
        A = np.maximum(A, 0).astype(np.int8)
    W = np.clip(np.where(mask, W, 0.0), 0.0, 1.0)
    if prob.power_levels is not None:
        W = np.where(A != 0, _quantize(prob, W), W)
    P = W * prob.p_max[None, :, None]
    pc = np.where(A == 1, P, 0.0)
    pd = np.where(A == -1, P, 0.0)

    cap = prob.capacity[None, :]
    eta_c, eta_d = prob.eta_charge, prob.eta_discharge
    d_soc = prob.discharge_soc_per_kwh()
    soc = np.broadcast_to(prob.soc_init[None, :], (m, n)).copy()
    path = np.empty((m, n, K + 1))
    path[:, :, 0] = soc
    for k in range(K):
        head = np.maximum(prob.soc_max - soc, 0.0) * cap / (eta_c * prob.dt_h)
        pck = np.minimum(pc[:, :, k], head)
        avail = np.maximum(soc - prob.soc_min, 0.0) * cap / (d_soc * prob.dt_h)
        pdk = np.minimum(pd[:, :, k], avail)
        pck = np.where(pck < _EPS_KW, 0.0, pck)
        pdk = np.where(pdk < _EPS_KW, 0.0, pdk)
        pc[:, :, k] = pck
        pd[:, :, k] = pdk
        soc = soc + (eta_c * pck - d_soc * pdk) * prob.dt_h / cap
        path[:, :, k + 1] = soc

    A = np.where(pc > 0, 1, np.where(pd > 0, -1, 0)).astype(np.int8)
    return A, pc, pd, path


def _clip_single(prob, i, pc, pd):
    """Scalar clip-and-path for one agent's slot vectors; returns the path."""
    ks = prob.n_slots[i]
    cap = prob.capacity[i]
    eta_c = prob.eta_charge
    d_soc = prob.discharge_soc_per_kwh()
    soc = prob.soc_init[i]
    path = np.empty(pc.shape[0] + 1)
    path[0] = soc
    for k in range(pc.shape[0]):
        if k < ks:
            head = max(prob.soc_max - soc, 0.0) * cap / (eta_c * prob.dt_h)
            pc[k] = min(pc[k], head)
            avail = max(soc - prob.soc_min, 0.0) * cap / (d_soc * prob.dt_h)
            pd[k] = min(pd[k], avail)
            if pc[k] < _EPS_KW:
                pc[k] = 0.0
            if pd[k] < _EPS_KW:
                pd[k] = 0.0
            soc += (eta_c * pc[k] - d_soc * pd[k]) * prob.dt_h / cap
        else:
            pc[k] = 0.0
            pd[k] = 0.0
        path[k + 1] = soc
    return path


def _fix_readiness(prob, i, pc, pd) -> float:
    """Top up one agent's schedule until the departure target is met.

    Adds charging in the cheapest slots first, then cancels discharges
    (cheapest price first).  Returns the remaining SOC deficit, 0 when fixed.
    """
    ks = int(prob.n_slots[i])
    hours = prob.slot_hour[i, :ks]
    lam = prob.tariff.price[hours]
    cap = prob.capacity[i]
    eta_c = prob.eta_charge
    add_order = sorted(range(ks), key=lambda k: (lam[k], k))
    path = _clip_single(prob, i, pc, pd)
    for _ in range(2 * ks + 2):
        deficit = prob.target[i] - path[-1]
        if deficit <= 1e-12:
            return 0.0
        progressed = False
        for k in add_order:
            if pd[k] > 0:
                continue
            head_p = prob.p_max[i] - pc[k]
            if head_p <= _EPS_KW:
                continue
            head_soc = prob.soc_max - path[k + 1 : ks + 1].max()
            if head_soc <= 1e-12:
                continue
            add = min(
                head_p,
                deficit * cap / (eta_c * prob.dt_h),
                head_soc * cap / (eta_c * prob.dt_h),
            )
            if add > _EPS_KW:
                pc[k] += add
                path = _clip_single(prob, i, pc, pd)
                progressed = True
                break
        if progressed:
            continue
        dis = [k for k in range(ks) if pd[k] > 0]
        if dis:
            k = min(dis, key=lambda k: (lam[k], k))
            pd[k] = 0.0
            path = _clip_single(prob, i, pc, pd)
            continue
        break
    return max(prob.target[i] - path[-1], 0.0)


def repair_batch(
    prob: SchedulingProblem, A: np.ndarray, W: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, list[list[dict]]]:
    """Full repair: SOC clipping plus the departure-readiness fix.

    Returns actions, charge/discharge power per slot, SOC paths and one
    violation list per individual.
    """
    A, pc, pd, path = _clip_batch(prob, A, W)
    m = A.shape[0]
    violations: list[list[dict]] = [[] for _ in range(m)]
    end = path[:, :, -1]
    deficient = np.argwhere(end < prob.target[None, :] - 1e-12)
    for ind, i in deficient:
        left = _fix_readiness(prob, i, pc[ind, i], pd[ind, i])
        if left > 1e-9:
            violations[ind].append(
                {
                    "kind": "readiness",
                    "agent": prob.agents[i].agent_id,
                    "magnitude": float(left * prob.capacity[i]),
                }
            )
    if deficient.size:
        # re-run the vectorised pass so paths and actions match the fixes
        W2 = np.divide(
            pc + pd, prob.p_max[None, :, None], out=np.zeros_like(pc),
            where=prob.p_max[None, :, None] > 0,
        )
        A2 = np.where(pc > 0, 1, np.where(pd > 0, -1, 0)).astype(np.int8)
        keep_levels = prob.power_levels
        prob.power_levels = None     # fixes may sit between quantised levels
        A, pc, pd, path = _clip_batch(prob, A2, np.clip(W2, 0.0, 1.0))
        prob.power_levels = keep_levels
    return A, pc, pd, path, violations


# -- evaluation ------------------------------------------------------------


def _slots_to_hours(prob: SchedulingProblem, per_slot: np.ndarray) -> np.ndarray:
    """Scatter [m, n, K] slot values onto [m, n, T] grid hours."""
    m, n, K = per_slot.shape
    T = prob.horizon
    # padded slots land in a scratch column so they cannot clobber hour 0
    out = np.zeros((m, n, T + 1))
    hour = np.where(prob.slot_mask, prob.slot_hour, T)
    np.put_along_axis(
        out,
        np.broadcast_to(hour[None, :, :], (m, n, K)),
        np.where(prob.slot_mask[None, :, :], per_slot, 0.0),
        axis=2,
    )
    return out[:, :, :T]


def _evaluate_chunk(prob: SchedulingProblem, A: np.ndarray, W: np.ndarray) -> list[ScheduleSolution]:
    A, pc_slot, pd_slot, path, violations = repair_batch(prob, A, W)
    m, n, K = A.shape
    T = prob.horizon
    pc_hour = _slots_to_hours(prob, pc_slot)
    pd_hour = _slots_to_hours(prob, pd_slot)

    # aggregate fleet power onto station buses
    nbus = prob.net.n_bus
    charge_bus = np.zeros((m, T, nbus))
    discharge_bus = np.zeros((m, T, nbus))
    for b in np.unique(prob.station_bus):
        sel = prob.station_bus == b
        charge_bus[:, :, b] = pc_hour[:, sel, :].sum(axis=1)
        discharge_bus[:, :, b] = pd_hour[:, sel, :].sum(axis=1)

    base_total = prob.base_p_kw.sum(axis=1)
    pv_total = prob.pv_kw.sum(axis=1)
    demand = (
        base_total[None, :]
        + charge_bus.sum(axis=2)
        - discharge_bus.sum(axis=2)
        - pv_total[None, :]
    )
    demand = np.maximum(demand, 0.0)
    # dispatch here only positions the DG injections for the flow solve; the
    # slack bus absorbs any remainder, so candidate schedules that overdraw
    # the import rating still evaluate (they pay for it through losses)
    p_units, p_grid_disp, _ = dispatch_hours(
        demand.reshape(-1),
        prob.net.dg_units,
        np.tile(prob.tariff.base_price, m),
        None,
    )
    dg_bus = np.zeros((m * T, nbus))
    for u, unit in enumerate(prob.net.dg_units):
        dg_bus[:, prob.net.index(unit.bus)] += p_units[:, u]
    dg_bus = dg_bus.reshape(m, T, nbus)

    inj_p, inj_q = net_injection(
        prob.net,
        np.broadcast_to(prob.base_p_kw[None], (m, T, nbus)).reshape(-1, nbus),
        np.broadcast_to(prob.base_q_kvar[None], (m, T, nbus)).reshape(-1, nbus),
        charge_kw=charge_bus.reshape(-1, nbus),
        discharge_kw=discharge_bus.reshape(-1, nbus),
        dg_kw=dg_bus.reshape(-1, nbus),
        pv_kw=np.broadcast_to(prob.pv_kw[None], (m, T, nbus)).reshape(-1, nbus),
    )
    flow = solve_series(prob.net, inj_p, inj_q)
    losses = flow.losses_kw.reshape(m, T)
    vmag = flow.vmag.reshape(m, T, nbus)
    grid_kw = flow.grid_kw.reshape(m, T)

    pv_kwh = float(prob.pv_kw.sum()) * prob.dt_h
    kg_cs, rev_cs = valuation.carbon_credit_cs(pv_kwh, prob.e_th, prob.emission_price)
    use_carbon = prob.flags.erq
    lam = prob.tariff.price

    out: list[ScheduleSolution] = []
    for j in range(m):
        pc_j = pc_hour[j]
        pd_j = pd_hour[j]
        discharged = pd_j.sum(axis=1) * prob.dt_h
        kg_ev, rev_ev = valuation.carbon_credit_ev(
            discharged, prob.e_gas, prob.emission_price
        )
        degr = (
            valuation.degradation_cost(discharged, prob.capacity, prob.degradation)
            if prob.flags.bdc
            else np.zeros(n)
        )
        costs = valuation.bev_cost(
            pc_j,
            pd_j,
            lam,
            eta_charge=prob.eta_charge,
            eta_discharge=prob.eta_discharge,
            carbon_revenue=rev_ev if use_carbon else 0.0,
            degradation=degr,
            dt_h=prob.dt_h,
        )
        f1 = valuation.evcs_benefit(
            pc_j,
            pd_j,
            lam,
            carbon_revenue_cs=(rev_cs if (use_carbon and prob.flags.res) else 0.0),
            dt_h=prob.dt_h,
        )
        f2 = prob.pi_loss * float(losses[j].sum()) * prob.dt_h

        viol = list(violations[j])
        flow_j = type(flow)(
            voltages=flow.voltages.reshape(m, T, nbus)[j],
            losses_kw=losses[j],
            branch_p_kw=np.zeros((T, 0)),
            grid_kw=grid_kw[j],
            iterations=flow.iterations,
            residual=flow.residual,
        )
        for bus_id, hour, mag in voltage_violations(flow_j, prob.net):
            viol.append(
                {"kind": "voltage", "bus": bus_id, "hour": hour, "magnitude": float(mag)}
            )
        residual = (
            grid_kw[j]
            + dg_bus[j].sum(axis=1)
            + prob.pv_kw.sum(axis=1)
            + pd_j.sum(axis=0)
            - pc_j.sum(axis=0)
            - prob.base_p_kw.sum(axis=1)
            - losses[j]
        )
        sol = ScheduleSolution(
            actions=_slots_to_hours(prob, A[j][None].astype(float))[0].astype(np.int8),
            p_charge_kw=pc_j,
            p_discharge_kw=pd_j,
            soc=path[j],
            soc_hour=_soc_to_hours(prob, path[j]),
            f1=f1,
            f2=f2,
            bev_cost=costs,
            losses_kwh=losses[j] * prob.dt_h,
            voltages=vmag[j],
            dg_kw=p_units.reshape(m, T, -1)[j],
            grid_kw=grid_kw[j],
            pv_kwh=pv_kwh if prob.flags.res else 0.0,
            carbon_kg_ev=float(kg_ev.sum()) if use_carbon else 0.0,
            carbon_kg_cs=kg_cs if (use_carbon and prob.flags.res) else 0.0,
            carbon_revenue_ev=float(rev_ev.sum()) if use_carbon else 0.0,
            carbon_revenue_cs=rev_cs if (use_carbon and prob.flags.res) else 0.0,
            degradation_total=float(degr.sum()),
            violations=viol,
            balance_residual_kw=float(np.abs(residual).max()) if T else 0.0,
        )
        out.append(sol)
    return out


def _soc_to_hours(prob: SchedulingProblem, path_i: np.ndarray) -> np.ndarray:
    """Post-action SOC per grid hour; hours outside the window hold flat."""
    n, K1 = path_i.shape
    out = np.tile(path_i[:, [0]], (1, prob.horizon))
    for i in range(n):
        ks = prob.n_slots[i]
        hours = prob.slot_hour[i, :ks]
        out[i, hours] = path_i[i, 1 : ks + 1]
        # hours after the last slot (parked but window closed) keep the final SOC
    return out


def evaluate_population(
    prob: SchedulingProblem,
    A: np.ndarray,
    W: np.ndarray,
    n_workers: int = 1,
) -> list[ScheduleSolution]:
    """Evaluate a batch of chromosomes, optionally across worker threads.

    Work is split into contiguous chunks and results are re-assembled in
    order; every code path is row-independent, so the outcome is identical
    for any worker count.
    """
    m = A.shape[0]
    if n_workers <= 1 or m == 1:
        return _evaluate_chunk(prob, A, W)
    bounds = np.linspace(0, m, n_workers + 1).astype(int)
    chunks = [(A[a:b], W[a:b]) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(lambda cw: _evaluate_chunk(prob, *cw), chunks))
    return [sol for part in parts for sol in part]


# -- seeding heuristics ----------------------------------------------------


def inner_dispatch(prob: SchedulingProblem, depth: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Owner-cost-greedy schedule used to seed the population.

    Charges in the cheapest plug-in hours until the departure target is met;
    with V2G enabled, adds discharge/recharge pairs while the price spread
    beats the round-trip cost (including wear and net of carbon credits).
    depth scales the V2G stage: 0 keeps the bare charging plan, 1 runs the
    pairing to exhaustion.  SOC paths are affine in the pair volume, so any
    scaled plan stays feasible.
    """
    n, K = prob.slot_hour.shape
    pc = np.zeros((n, K))
    pd = np.zeros((n, K))
    eta_c, eta_d = prob.eta_charge, prob.eta_discharge
    d_soc = prob.discharge_soc_per_kwh()
    carbon = prob.e_gas * prob.emission_price if prob.flags.erq else 0.0
    pc_base = np.zeros((n, K))
    for i in range(n):
        ks = int(prob.n_slots[i])
        hours = prob.slot_hour[i, :ks]
        lam = prob.tariff.price[hours]
        cap = prob.capacity[i]
        order = sorted(range(ks), key=lambda k: (lam[k], k))
        need = max(prob.target[i] - prob.soc_init[i], 0.0) * cap / (eta_c * prob.dt_h)
        for k in order:
            if need <= _EPS_KW:
                break
            take = min(prob.p_max[i], need)
            pc[i, k] = take
            need -= take
        pc_base[i] = pc[i]
        if not prob.flags.v2g or depth <= 0.0:
            continue
        wear = (
            float(
                valuation.degradation_cost(
                    np.array([1.0]), np.array([cap]), prob.degradation
                )[0]
            )
            if prob.flags.bdc
            else 0.0
        )
        path = _clip_single(prob, i, pc[i, :ks].copy(), pd[i, :ks].copy())
        pci, pdi = pc[i, :ks], pd[i, :ks]
        for d in sorted(range(ks), key=lambda k: (-lam[k], k)):
            if pci[d] > 0:
                continue
            gain = eta_d * lam[d] + carbon - wear
            for c in sorted(range(ks), key=lambda k: (lam[k], k)):
                if c == d or pdi[c] > 0:
                    continue
                if gain - eta_d * lam[c] <= 1e-12:
                    break
                head_d = prob.p_max[i] - pdi[d]
                head_c = prob.p_max[i] - pci[c]
                if head_d <= _EPS_KW or head_c <= _EPS_KW:
                    continue
                if c > d:
                    seg = path[d + 1 : c + 1]
                    slack = (seg.min() - prob.soc_min) * cap / (d_soc * prob.dt_h)
                else:
                    seg = path[c + 1 : d + 1]
                    slack = (prob.soc_max - seg.max()) * cap / (eta_c * prob.dt_h) * (
                        eta_c / d_soc
                    )
                delta = min(head_d, head_c * eta_c / d_soc, slack)
                if delta <= _EPS_KW:
                    continue
                pdi[d] += delta
                pci[c] += d_soc * delta / eta_c
                path = _clip_single(prob, i, pci.copy(), pdi.copy())
                if prob.p_max[i] - pdi[d] <= _EPS_KW:
                    break
    if prob.flags.v2g and 0.0 < depth < 1.0:
        pc = pc_base + depth * (pc - pc_base)
        pd = depth * pd
    A = np.where(pc > 0, 1, np.where(pd > 0, -1, 0)).astype(np.int8)
    W = np.divide(
        pc + pd, prob.p_max[:, None], out=np.zeros_like(pc),
        where=prob.p_max[:, None] > 0,
    )
    return A, np.clip(W, 0.0, 1.0)


def dumb_charging(prob: SchedulingProblem) -> tuple[np.ndarray, np.ndarray]:
    """Uncoordinated behaviour: charge flat out from plug-in until the
    departure requirement is met, price-blind, then idle.

    Owners buy only the energy the next trip needs; what is uncoordinated
    is the timing (immediately on arrival), not the amount.
    """
    n, K = prob.slot_hour.shape
    pc = np.zeros((n, K))
    for i in range(n):
        ks = int(prob.n_slots[i])
        need = (
            max(prob.target[i] - prob.soc_init[i], 0.0)
            * prob.capacity[i]
            / (prob.eta_charge * prob.dt_h)
        )
        for k in range(ks):
            if need <= _EPS_KW:
                break
            take = min(prob.p_max[i], need)
            pc[i, k] = take
            need -= take
    A = (pc > 0).astype(np.int8)
    W = np.divide(
        pc, prob.p_max[:, None], out=np.zeros_like(pc),
        where=prob.p_max[:, None] > 0,
    )
    return A, np.clip(W, 0.0, 1.0)


def water_filling_baseline(prob: SchedulingProblem) -> tuple[np.ndarray, np.ndarray]:
    """Valley-filling / peak-shaving heuristic on the aggregate load curve.

    Each agent (in id order) pours its departure charging need into the
    lowest-load hours of its window up to a common water level; agents that
    arrive above their target shed the surplus at the highest-load hours.
    Price-blind by construction, and it allocates only the energy the fleet
    actually demands rather than speculating with spare battery headroom.
    """
    n, K = prob.slot_hour.shape
    pc = np.zeros((n, K))
    pd = np.zeros((n, K))
    curve = prob.base_p_kw.sum(axis=1).copy()
    eta_c = prob.eta_charge
    d_soc = prob.discharge_soc_per_kwh()
    for i in range(n):
        ks = int(prob.n_slots[i])
        hours = prob.slot_hour[i, :ks]
        cap = prob.capacity[i]
        pmax = prob.p_max[i]
        need = max(prob.target[i] - prob.soc_init[i], 0.0) * cap / (eta_c * prob.dt_h)
        load = curve[hours]
        if need > _EPS_KW:
            lo, hi = float(load.min()), float(load.max()) + pmax + need
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if np.clip(mid - load, 0.0, pmax).sum() >= need:
                    hi = mid
                else:
                    lo = mid
            alloc = np.clip(hi - load, 0.0, pmax)
            excess = alloc.sum() - need
            if excess > 0 and alloc.sum() > 0:
                alloc *= need / alloc.sum()
            pc[i, :ks] = alloc
        if prob.flags.v2g:
            budget = max(prob.soc_init[i] - prob.target[i], 0.0) * cap / (
                d_soc * prob.dt_h
            )
            load2 = curve[hours] + pc[i, :ks]
            head = np.where(pc[i, :ks] > 0, 0.0, pmax)
            if budget > _EPS_KW and head.sum() > _EPS_KW:
                lo, hi = float(load2.min()) - pmax - budget, float(load2.max())
                for _ in range(60):
                    mid = 0.5 * (lo + hi)
                    if np.minimum(np.clip(load2 - mid, 0.0, pmax), head).sum() >= budget:
                        lo = mid
                    else:
                        hi = mid
                pd[i, :ks] = np.minimum(np.clip(load2 - lo, 0.0, pmax), head)
                over = pd[i, :ks].sum() - budget
                if over > 0 and pd[i, :ks].sum() > 0:
                    pd[i, :ks] *= budget / pd[i, :ks].sum()
        # SOC feasibility and the departure target, then commit to the curve
        _clip_single(prob, i, pc[i, :ks], pd[i, :ks])
        _fix_readiness(prob, i, pc[i, :ks], pd[i, :ks])
        curve[hours] += pc[i, :ks] - pd[i, :ks]
    A = np.where(pc > 0, 1, np.where(pd > 0, -1, 0)).astype(np.int8)
    W = np.divide(
        pc + pd, prob.p_max[:, None], out=np.zeros_like(pc),
        where=prob.p_max[:, None] > 0,
    )
    return A, np.clip(W, 0.0, 1.0)


# -- NSGA-II ---------------------------------------------------------------


@dataclass
class ParetoFront:
    solutions: list[ScheduleSolution]
    history: list[dict] = field(default_factory=list)
    degraded: bool = False

    @property
    def f1(self) -> np.ndarray:
        return np.array([s.f1 for s in self.solutions])

    @property
    def f2(self) -> np.ndarray:
        return np.array([s.f2 for s in self.solutions])

    def __len__(self) -> int:
        return len(self.solutions)


def _costs(solutions: Sequence[ScheduleSolution]) -> np.ndarray:
    return np.array([[-s.f1, s.f2] for s in solutions])


def _dominates_matrix(costs: np.ndarray, viol: np.ndarray) -> np.ndarray:
    """dom[i, j] True when i constraint-dominates j."""
    feas = viol <= 0.0
    le = (costs[:, None, :] <= costs[None, :, :]).all(axis=2)
    lt = (costs[:, None, :] < costs[None, :, :]).any(axis=2)
    pareto = le & lt
    fi = feas[:, None]
    fj = feas[None, :]
    by_violation = viol[:, None] < viol[None, :]
    return (fi & ~fj) | (~fi & ~fj & by_violation) | (fi & fj & pareto)


def fast_non_dominated_sort(costs: np.ndarray, viol: np.ndarray) -> list[np.ndarray]:
    dom = _dominates_matrix(costs, viol)
    n_dom = dom.sum(axis=0)
    fronts = []
    remaining = np.arange(len(costs))
    counts = n_dom.copy()
    while remaining.size:
        mask = counts[remaining] == 0
        if not mask.any():
            # numerical ties can leave a cycle-free residue; take the minimum
            mask = counts[remaining] == counts[remaining].min()
        front = remaining[mask]
        fronts.append(front)
        remaining = remaining[~mask]
        if remaining.size:
            counts[remaining] -= dom[np.ix_(front, remaining)].sum(axis=0)
    return fronts


def crowding_distance(costs: np.ndarray) -> np.ndarray:
    n = len(costs)
    if n <= 2:
        return np.full(n, np.inf)
    dist = np.zeros(n)
    for d in range(costs.shape[1]):
        order = np.argsort(costs[:, d], kind="stable")
        lo, hi = costs[order[0], d], costs[order[-1], d]
        dist[order[0]] = dist[order[-1]] = np.inf
        if hi - lo <= 0:
            continue
        gaps = (costs[order[2:], d] - costs[order[:-2], d]) / (hi - lo)
        dist[order[1:-1]] += gaps
    return dist


def hypervolume(costs: np.ndarray, ref: np.ndarray) -> float:
    """Dominated area between a 2-D cost front and a reference point."""
    pts = costs[(costs[:, 0] < ref[0]) & (costs[:, 1] < ref[1])]
    if not len(pts):
        return 0.0
    order = np.argsort(pts[:, 0], kind="stable")
    hv = 0.0
    best_c2 = ref[1]
    for c1, c2 in pts[order]:
        if c2 < best_c2:
            hv += (ref[0] - c1) * (best_c2 - c2)
            best_c2 = c2
    return float(hv)


def _pareto_filter(costs: np.ndarray) -> np.ndarray:
    """Indices of the non-dominated, objective-unique points (stable order)."""
    n = len(costs)
    if n == 0:
        return np.array([], dtype=int)
    le = (costs[:, None, :] <= costs[None, :, :]).all(axis=2)
    lt = (costs[:, None, :] < costs[None, :, :]).any(axis=2)
    dominated = (le & lt).any(axis=0)
    # identical objectives: keep only the first occurrence
    dupe = (le & ~lt) & (np.arange(n)[:, None] < np.arange(n)[None, :])
    return np.flatnonzero(~dominated & ~dupe.any(axis=0))


def _random_genes(prob, m, rng):
    lo = -1 if prob.flags.v2g else 0
    A = rng.integers(lo, 2, size=(m, *prob.slot_hour.shape)).astype(np.int8)
    W = rng.random((m, *prob.slot_hour.shape))
    return A, W


def _mutate(prob, A, W, rng, rate):
    lo = -1 if prob.flags.v2g else 0
    pick = rng.random(A.shape) < rate
    A = np.where(pick, rng.integers(lo, 2, size=A.shape), A).astype(np.int8)
    pick = rng.random(W.shape) < rate
    W = np.where(pick, rng.random(W.shape), W)
    return A, W


def _owner_place(prob: SchedulingProblem, A: np.ndarray, W: np.ndarray):
    """Re-seat each agent's genes the way its owner would dispatch them.

    Charging lands in the cheapest plug-in hours (largest power first) and
    discharging in the dearest, so a chromosome encodes an energy package per
    agent while hour placement stays price-rational.  The genetic search then
    decides how much energy moves, not at which tariff it moves.

    Agents are seated in id order against the running fleet curve: ties
    inside a tariff period go to the hour that is lightest once earlier
    agents are counted, so equal-price hours fill like water instead of
    stacking the whole fleet onto one slot.
    """
    single = A.ndim == 2
    if single:
        A, W = A[None], W[None]
    m = A.shape[0]
    n, K = prob.slot_hour.shape
    mask = prob.slot_mask
    A = np.where(mask[None], A, 0).astype(np.int8)
    W = np.where(mask[None], W, 0.0)
    A2 = np.zeros_like(A)
    W2 = np.zeros_like(W)
    curve = np.repeat(prob.base_p_kw.sum(axis=1)[None, :], m, axis=0)
    idx = np.arange(K)
    for i in range(n):
        ks = int(prob.n_slots[i])
        if ks == 0:
            continue
        hours = prob.slot_hour[i, :ks]
        lam = np.broadcast_to(prob.tariff.price[hours], (m, ks))
        slot = np.broadcast_to(idx[:ks], (m, ks))
        cheap = np.lexsort((slot, curve[:, hours], lam), axis=-1)
        c_rank = np.empty((m, ks), dtype=int)
        np.put_along_axis(c_rank, cheap, slot.copy(), axis=-1)
        # dear-first rank is the cheap-first rank reversed, with the opposite
        # tie-break (price desc, load desc), so charge and discharge seatings
        # can never collide while |C| + |D| <= n_slots
        d_rank = ks - 1 - c_rank

        Ai, Wi = A[:, i, :ks], W[:, i, :ks]
        c_cnt = (Ai == 1).sum(axis=-1, keepdims=True)
        d_cnt = (Ai == -1).sum(axis=-1, keepdims=True)
        wc = -np.sort(np.where(Ai == 1, -Wi, 0.0), axis=-1)
        wd = -np.sort(np.where(Ai == -1, -Wi, 0.0), axis=-1)
        is_c = c_rank < c_cnt
        is_d = d_rank < d_cnt
        Wn = np.where(is_c, np.take_along_axis(wc, c_rank, axis=-1), 0.0)
        Wn = np.where(is_d, np.take_along_axis(wd, d_rank, axis=-1), Wn)
        A2[:, i, :ks] = np.where(is_c, 1, np.where(is_d, -1, 0)).astype(np.int8)
        W2[:, i, :ks] = Wn
        signed = np.where(is_c, Wn, np.where(is_d, -Wn, 0.0)) * prob.p_max[i]
        curve[:, hours] += signed
    return (A2[0], W2[0]) if single else (A2, W2)


def nsga2_run(
    prob: SchedulingProblem,
    population: int = 100,
    generations: int = 200,
    rng: Optional[np.random.Generator] = None,
    n_workers: int = 1,
    crossover_prob: float = 0.9,
    blend_alpha: float = 0.5,
    seed_fraction: float = 0.5,
) -> ParetoFront:
    """Evolve fleet schedules and return the archive of non-dominated
    feasible solutions (with per-generation convergence history).

    With a fixed rng state the run is fully deterministic; the worker count
    only splits evaluation batches and never changes results.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if population < 4:
        raise ValueError("population must be at least 4")
    pop_even = population + population % 2

    n_seed = max(1, int(round(pop_even * seed_fraction)))
    seed_A, seed_W = inner_dispatch(prob)
    A = np.empty((pop_even, *prob.slot_hour.shape), dtype=np.int8)
    W = np.empty((pop_even, *prob.slot_hour.shape))
    A[0], W[0] = seed_A, seed_W
    grades = n_seed - (2 if n_seed >= 3 else 1)
    for j in range(1, grades + 1):
        if prob.flags.v2g:
            # spread the dispatch-policy seeds across V2G depths so the
            # initial front spans shallow to exhaustive cycling
            A[j], W[j] = inner_dispatch(prob, depth=1.0 - j / grades)
        else:
            A[j], W[j] = _mutate(prob, seed_A.copy(), seed_W.copy(), rng, 0.05)
    if n_seed >= 3:
        # one corner seed soaks up the whole SOC headroom; placement will
        # seat it in the cheapest hours
        kn = np.ceil(
            (prob.soc_max - prob.soc_init) * prob.capacity
            / (prob.eta_charge * np.maximum(prob.p_max, _EPS_KW) * prob.dt_h)
        ).astype(int)
        kn = np.minimum(kn, prob.n_slots)
        fill = np.arange(prob.slot_hour.shape[1])[None, :] < kn[:, None]
        A[n_seed - 1] = np.where(fill, 1, 0).astype(np.int8)
        W[n_seed - 1] = np.where(fill, 1.0, 0.0)
    if pop_even > n_seed:
        A[n_seed:], W[n_seed:] = _random_genes(prob, pop_even - n_seed, rng)
    A, W = _owner_place(prob, A, W)

    solutions = evaluate_population(prob, A, W, n_workers)
    costs = _costs(solutions)
    viol = np.array([s.violation_sum for s in solutions])
    ref = costs.max(axis=0) * 1.05 + 1e-6

    archive: list[ScheduleSolution] = []
    best_infeasible: list[ScheduleSolution] = []

    def update_archive():
        nonlocal archive, best_infeasible
        feas = [s for s in solutions if s.feasible]
        pool = archive + feas
        if pool:
            keep = _pareto_filter(_costs(pool))
            archive = [pool[i] for i in keep]
        if not archive:
            pool2 = best_infeasible + list(solutions)
            vmin = min(s.violation_sum for s in pool2)
            near = [s for s in pool2 if s.violation_sum <= vmin + 1e-12]
            keep = _pareto_filter(_costs(near))
            best_infeasible = [near[i] for i in keep]

    history: list[dict] = []

    def log(gen):
        pts = _costs(archive) if archive else np.empty((0, 2))
        history.append(
            {
                "generation": gen,
                "hypervolume": hypervolume(pts, ref) if len(pts) else 0.0,
                "feasible": int(sum(1 for s in solutions if s.feasible)),
            }
        )

    update_archive()
    log(0)

    num_genes = max(prob.num_genes, 1)
    pm = 1.0 / num_genes
    fronts = fast_non_dominated_sort(costs, viol)
    rank = np.empty(pop_even, dtype=int)
    crowd = np.empty(pop_even)
    for r, f in enumerate(fronts):
        rank[f] = r
        crowd[f] = crowding_distance(costs[f])

    for gen in range(1, generations + 1):
        # binary tournaments: feasibility first, then rank, then crowding
        cand = rng.integers(0, pop_even, size=(pop_even, 2))

        def better(a, b):
            fa, fb = viol[a] <= 0, viol[b] <= 0
            if fa != fb:
                return a if fa else b
            if not fa:
                return a if viol[a] <= viol[b] else b
            if rank[a] != rank[b]:
                return a if rank[a] < rank[b] else b
            if crowd[a] != crowd[b]:
                return a if crowd[a] > crowd[b] else b
            return min(a, b)

        parents = np.array([better(a, b) for a, b in cand])
        pa, wa = A[parents], W[parents]
        child_A = pa.copy()
        child_W = wa.copy()
        for j in range(0, pop_even, 2):
            if rng.random() >= crossover_prob:
                continue
            swap = rng.random(prob.slot_hour.shape) < 0.5
            a1, a2 = child_A[j].copy(), child_A[j + 1].copy()
            child_A[j][swap] = a2[swap]
            child_A[j + 1][swap] = a1[swap]
            u = rng.uniform(-blend_alpha, 1 + blend_alpha, prob.slot_hour.shape)
            w1, w2 = child_W[j].copy(), child_W[j + 1].copy()
            child_W[j] = np.clip(u * w1 + (1 - u) * w2, 0.0, 1.0)
            child_W[j + 1] = np.clip((1 - u) * w1 + u * w2, 0.0, 1.0)
        child_A, child_W = _mutate(prob, child_A, child_W, rng, pm)
        child_A, child_W = _owner_place(prob, child_A, child_W)

        child_solutions = evaluate_population(prob, child_A, child_W, n_workers)
        all_A = np.concatenate([A, child_A])
        all_W = np.concatenate([W, child_W])
        all_solutions = solutions + child_solutions
        all_costs = _costs(all_solutions)
        all_viol = np.array([s.violation_sum for s in all_solutions])

        fronts = fast_non_dominated_sort(all_costs, all_viol)
        chosen: list[int] = []
        for f in fronts:
            if len(chosen) + len(f) <= pop_even:
                chosen.extend(f.tolist())
                if len(chosen) == pop_even:
                    break
            else:
                cd = crowding_distance(all_costs[f])
                order = sorted(range(len(f)), key=lambda i: (-cd[i], f[i]))
                chosen.extend(f[i] for i in order[: pop_even - len(chosen)])
                break
        chosen_arr = np.array(chosen)
        A, W = all_A[chosen_arr], all_W[chosen_arr]
        solutions = [all_solutions[i] for i in chosen]
        costs = all_costs[chosen_arr]
        viol = all_viol[chosen_arr]
        fronts = fast_non_dominated_sort(costs, viol)
        rank = np.empty(pop_even, dtype=int)
        crowd = np.empty(pop_even)
        for r, f in enumerate(fronts):
            rank[f] = r
            crowd[f] = crowding_distance(costs[f])

        update_archive()
        log(gen)

    if archive:
        order = np.argsort([s.f1 for s in archive], kind="stable")
        return ParetoFront([archive[i] for i in order], history, degraded=False)
    order = np.argsort([s.f1 for s in best_infeasible], kind="stable")
    return ParetoFront([best_infeasible[i] for i in order], history, degraded=True)


def select_weighted(front: ParetoFront, alpha: float = 0.5) -> tuple[int, ScheduleSolution]:
    """Pick one solution by weighted min-max normalised objectives.

    alpha weighs the station-benefit axis (as a cost, so benefit is negated);
    1 - alpha weighs the loss cost.  Ties break toward higher f1, then lower
    f2, then the lower index.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if not front.solutions:
        raise ValueError("empty front")
    costs = _costs(front.solutions)
    lo = costs.min(axis=0)
    span = costs.max(axis=0) - lo
    norm = np.where(span > 0, (costs - lo) / np.where(span > 0, span, 1.0), 0.0)
    score = alpha * norm[:, 0] + (1 - alpha) * norm[:, 1]
    order = sorted(
        range(len(score)),
        key=lambda i: (score[i], -front.solutions[i].f1, front.solutions[i].f2, i),
    )
    best = order[0]
    return best, front.solutions[best]
