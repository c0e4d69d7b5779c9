"""BEV fleet synthesis: travel behaviour sampling, node allocation and
station assignment.

Behaviour draws are Monte Carlo: departure and return times are truncated
normals, daily distance is lognormal, and the initial state of charge is
derived from the trip energy and then clamped into a fixed arrival band.
Every agent draws from its own RNG sub-stream keyed by (master seed, agent
id), so fleets are reproducible and independent of evaluation order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .grid import NetworkModel, Station
from .market import TariffSchedule


class SamplingError(RuntimeError):
    """Rejection sampling failed to produce a consistent behaviour tuple."""


@dataclass(frozen=True)
class BevTypeSpec:
    name: str
    kwh_per_km: float
    share: float
    capacity_kwh: tuple[float, float]
    power_factor: float          # max charge/discharge power as fraction of capacity


@dataclass(frozen=True)
class BevBehavior:
    t_out: float                 # departure hour
    t_back: float                # return hour, > t_out
    distance_km: float
    soc_initial: float           # after clamping into the arrival band
    soc_initial_raw: float       # (E_b - s*E') / E_b before clamping


@dataclass
class FleetConfig:
    n_bevs: int = 800
    depart_mean_h: float = 7.0
    depart_std_h: float = 1.0
    return_mean_h: float = 17.0
    return_std_h: float = 2.0
    distance_log_mean: float = 3.2
    distance_log_std: float = 0.88
    group_shares: Mapping[str, float] = field(
        default_factory=lambda: {"A": 0.343, "B": 0.302, "C": 0.355}
    )
    soc_init_min: float = 0.15
    soc_init_max: float = 0.25
    eta_charge: float = 0.9
    eta_discharge: float = 0.9
    max_hops: int = 5
    bev_types: Sequence[BevTypeSpec] = field(
        default_factory=lambda: (
            BevTypeSpec("compact_sedan", 0.1625, 0.60, (10.0, 20.0), 0.8),
            BevTypeSpec("midsize_sedan", 0.1875, 0.12, (20.0, 30.0), 0.7),
            BevTypeSpec("midsize_suv", 0.2375, 0.13, (30.0, 40.0), 0.6),
            BevTypeSpec("fullsize_suv", 0.2875, 0.15, (40.0, 50.0), 0.5),
        )
    )

    def __post_init__(self):
        total = sum(t.share for t in self.bev_types)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"BEV type shares sum to {total}, expected 1")


@dataclass
class BevAgent:
    agent_id: int
    type_name: str
    capacity_kwh: float
    behavior: BevBehavior
    group: str
    home_node: int
    max_power_kw: float
    trip_energy_kwh: float
    station: Optional[int] = None          # station bus, None until assigned

    @property
    def rejected(self) -> bool:
        return self.station is None


def plug_hours(t_back: float, t_out: float, horizon: int = 24) -> list[int]:
    """Hour slots the BEV is plugged in, in battery-time order.

    The window wraps midnight: evening slots from the return hour run first,
    then the morning slots before departure.  A slot counts only if the BEV
    is present for the whole hour.
    """
    evening = [h for h in range(horizon) if h >= t_back]
    morning = [h for h in range(horizon) if h + 1 <= t_out]
    seen = set(evening)
    return evening + [h for h in morning if h not in seen]


def sample_behavior(
    cfg: FleetConfig,
    type_spec: BevTypeSpec,
    capacity_kwh: float,
    rng: np.random.Generator,
    max_draws: int = 1000,
) -> BevBehavior:
    """Draw one consistent (t_out, t_back, distance) tuple by rejection.

    Consistency: 0 <= t_out < t_back and trip energy below the battery
    capacity.  Zero-variance configs collapse to the means.
    """
    for _ in range(max_draws):
        t_out = (
            cfg.depart_mean_h
            if cfg.depart_std_h == 0
            else rng.normal(cfg.depart_mean_h, cfg.depart_std_h)
        )
        t_back = (
            cfg.return_mean_h
            if cfg.return_std_h == 0
            else rng.normal(cfg.return_mean_h, cfg.return_std_h)
        )
        distance = (
            math.exp(cfg.distance_log_mean)
            if cfg.distance_log_std == 0
            else rng.lognormal(cfg.distance_log_mean, cfg.distance_log_std)
        )
        if t_out < 0 or t_back < 0 or t_out >= t_back:
            continue
        trip_energy = distance * type_spec.kwh_per_km
        if trip_energy >= capacity_kwh:
            continue
        raw = (capacity_kwh - trip_energy) / capacity_kwh
        soc0 = min(max(raw, cfg.soc_init_min), cfg.soc_init_max)
        return BevBehavior(t_out, t_back, distance, soc0, raw)
    raise SamplingError(
        f"no consistent behaviour tuple for {type_spec.name} in {max_draws} draws"
    )


def _largest_remainder(quotas: Sequence[float], total: int) -> list[int]:
    """Integerise fractional quotas so the counts sum exactly to total."""
    floors = [int(math.floor(q)) for q in quotas]
    counts = list(floors)
    short = total - sum(floors)
    remainders = sorted(
        range(len(quotas)), key=lambda i: (-(quotas[i] - floors[i]), i)
    )
    for i in remainders[:short]:
        counts[i] += 1
    return counts


def allocate_counts(
    n_bevs: int,
    group_shares: Mapping[str, float],
    base_loads: Mapping[str, Mapping[int, float]],
) -> dict[str, dict[int, int]]:
    """Apportion the fleet over nodes: by group share, then by node load.

    base_loads maps group -> {node: daily energy}.  Both stages use largest
    remainder rounding, so group totals and the overall fleet size are exact.
    """
    groups = sorted(group_shares)
    share_sum = sum(group_shares[g] for g in groups)
    if abs(share_sum - 1.0) > 1e-9:
        raise ValueError(f"group shares sum to {share_sum}, expected 1")
    group_totals = _largest_remainder(
        [n_bevs * group_shares[g] for g in groups], n_bevs
    )
    out: dict[str, dict[int, int]] = {}
    for g, n_g in zip(groups, group_totals):
        nodes = sorted(base_loads.get(g, {}))
        load_sum = sum(base_loads[g][b] for b in nodes) if nodes else 0.0
        if n_g > 0 and (not nodes or load_sum <= 0):
            raise ValueError(f"group {g} has BEVs to place but no load to weight by")
        quotas = [n_g * base_loads[g][b] / load_sum for b in nodes]
        counts = _largest_remainder(quotas, n_g)
        out[g] = {b: c for b, c in zip(nodes, counts)}
    return out


def group_base_loads(
    net: NetworkModel,
    segments: Mapping[int, Sequence[int]],
    segment_groups: Mapping[int, str],
) -> dict[str, dict[int, float]]:
    """Daily base energy per node, keyed by consumption-pattern group."""
    if net.load_shape is None:
        raise ValueError("network has no load shape configured")
    day_factor = float(net.load_shape.sum()) * net.load_scale
    out: dict[str, dict[int, float]] = {}
    for seg, buses in segments.items():
        group = segment_groups[seg]
        for b in buses:
            out.setdefault(group, {})[b] = net.p_load_kw[net.index(b)] * day_factor
    return out


def build_fleet(
    cfg: FleetConfig,
    counts: Mapping[str, Mapping[int, int]],
    seed: int,
    rate_multiplier: float = 1.0,
) -> list[BevAgent]:
    """Instantiate agents for the allocated counts.

    Agents are numbered in (group, node) order; agent i draws type, capacity
    and behaviour from np.random.default_rng([seed, i]) so any agent can be
    reproduced in isolation.
    """
    shares = np.array([t.share for t in cfg.bev_types])
    agents: list[BevAgent] = []
    agent_id = 0
    for group in sorted(counts):
        for node in sorted(counts[group]):
            for _ in range(counts[group][node]):
                rng = np.random.default_rng([seed, agent_id])
                tspec = cfg.bev_types[int(rng.choice(len(shares), p=shares))]
                lo, hi = tspec.capacity_kwh
                capacity = float(lo if hi == lo else rng.uniform(lo, hi))
                behavior = sample_behavior(cfg, tspec, capacity, rng)
                agents.append(
                    BevAgent(
                        agent_id=agent_id,
                        type_name=tspec.name,
                        capacity_kwh=capacity,
                        behavior=behavior,
                        group=group,
                        home_node=node,
                        max_power_kw=tspec.power_factor * capacity * rate_multiplier,
                        trip_energy_kwh=behavior.distance_km * tspec.kwh_per_km,
                    )
                )
                agent_id += 1
    return agents


class StationOccupancy:
    """Per-station hourly plug occupancy accumulated during assignment."""

    def __init__(self, stations: Sequence[Station], horizon: int = 24):
        self.stations = {s.bus: s for s in stations}
        self.used = {s.bus: np.zeros(horizon, dtype=int) for s in stations}

    def fits(self, bus: int, hours: Sequence[int]) -> bool:
        cap = self.stations[bus].plugs
        return bool(np.all(self.used[bus][list(hours)] < cap))

    def peak(self, bus: int, hours: Sequence[int]) -> int:
        if not hours:
            return 0
        return int(self.used[bus][list(hours)].max())

    def occupy(self, bus: int, hours: Sequence[int]) -> None:
        self.used[bus][list(hours)] += 1


def assign_station(
    agent: BevAgent,
    net: NetworkModel,
    occupancy: StationOccupancy,
    prices: Union[TariffSchedule, Mapping[int, TariffSchedule]],
    max_hops: int,
) -> Optional[int]:
    """Pick a station for one agent, or None if it cannot participate.

    Feasible stations lie within max_hops tree hops of the home node and
    have a free plug for every hour of the plug-in window.  Ties resolve by
    hop count, then mean window price, then current peak occupancy, then
    station bus.  Prices may be a single tariff or one per station bus.
    """
    hours = plug_hours(agent.behavior.t_back, agent.behavior.t_out)
    if not hours:
        return None
    candidates = []
    for bus in sorted(occupancy.stations):
        hops = net.hop_distance(agent.home_node, bus)
        if hops > max_hops:
            continue
        if not occupancy.fits(bus, hours):
            continue
        tariff = prices[bus] if isinstance(prices, Mapping) else prices
        candidates.append(
            (hops, tariff.mean_price(hours), occupancy.peak(bus, hours), bus)
        )
    if not candidates:
        return None
    return min(candidates)[3]


def assign_fleet(
    agents: Sequence[BevAgent],
    net: NetworkModel,
    prices: Union[TariffSchedule, Mapping[int, TariffSchedule]],
    max_hops: int,
    horizon: int = 24,
) -> StationOccupancy:
    """Assign every agent in id order, mutating agent.station in place."""
    occupancy = StationOccupancy(net.stations, horizon)
    for agent in sorted(agents, key=lambda a: a.agent_id):
        bus = assign_station(agent, net, occupancy, prices, max_hops)
        agent.station = bus
        if bus is not None:
            occupancy.occupy(bus, plug_hours(agent.behavior.t_back, agent.behavior.t_out))
    return occupancy


FLEET_CSV_FIELDS = (
    "id", "type", "capacity_kwh", "t_out", "t_back", "distance_km",
    "soc_init", "group", "home_node", "station",
)


def fleet_to_csv(agents: Sequence[BevAgent], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FLEET_CSV_FIELDS)
        for a in agents:
            writer.writerow(
                [
                    a.agent_id,
                    a.type_name,
                    repr(a.capacity_kwh),
                    repr(a.behavior.t_out),
                    repr(a.behavior.t_back),
                    repr(a.behavior.distance_km),
                    repr(a.behavior.soc_initial),
                    a.group,
                    a.home_node,
                    "REJECTED" if a.station is None else a.station,
                ]
            )


def fleet_from_csv(path, cfg: FleetConfig) -> list[BevAgent]:
    """Rebuild agents from a fleet CSV written by fleet_to_csv."""
    types = {t.name: t for t in cfg.bev_types}
    agents = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            tspec = types[row["type"]]
            capacity = float(row["capacity_kwh"])
            distance = float(row["distance_km"])
            trip = distance * tspec.kwh_per_km
            behavior = BevBehavior(
                t_out=float(row["t_out"]),
                t_back=float(row["t_back"]),
                distance_km=distance,
                soc_initial=float(row["soc_init"]),
                soc_initial_raw=(capacity - trip) / capacity,
            )
            agents.append(
                BevAgent(
                    agent_id=int(row["id"]),
                    type_name=row["type"],
                    capacity_kwh=capacity,
                    behavior=behavior,
                    group=row["group"],
                    home_node=int(row["home_node"]),
                    max_power_kw=tspec.power_factor * capacity,
                    trip_energy_kwh=trip,
                    station=None if row["station"] == "REJECTED" else int(row["station"]),
                )
            )
    return agents
