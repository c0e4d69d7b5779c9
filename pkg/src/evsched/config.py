"""Configuration loading and the scenario presets.

All numeric defaults live in ``data/paper_defaults.yaml``; a user file only
needs the keys it overrides.  Builders turn the merged mapping into the
domain objects of the other modules.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
import yaml

from .fleet import BevTypeSpec, FleetConfig
from .grid import Branch, DgUnit, NetworkModel, Station
from .market import ElasticityMatrix, TariffSchedule, label_periods
from .optimizer import ScenarioFlags
from .valuation import DegradationParams

# feature switches per scenario preset: V2G, degradation compensation,
# station PV, incentive-spread pricing, carbon credits
SCENARIO_PRESETS: dict[str, ScenarioFlags] = {
    "S1": ScenarioFlags(),
    "S2": ScenarioFlags(v2g=True),
    "S3": ScenarioFlags(v2g=True, bdc=True),
    "S4": ScenarioFlags(v2g=True, bdc=True, res=True),
    "S5": ScenarioFlags(v2g=True, bdc=True, oep=True),
    "S6": ScenarioFlags(v2g=True, bdc=True, res=True, erq=True),
    "S7": ScenarioFlags(v2g=True, bdc=True, res=True, oep=True, erq=True),
}

RATE_TIERS = ("slow", "regular", "fast")


class ConfigError(ValueError):
    pass


def _deep_merge(base: dict, override: Mapping) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def default_config() -> dict:
    text = resources.files("evsched.data").joinpath("paper_defaults.yaml").read_text()
    return yaml.safe_load(text)


def load_config(path: Optional[str | Path] = None) -> dict:
    """Defaults deep-merged with an optional user YAML file."""
    cfg = default_config()
    if path is not None:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        cfg = _deep_merge(cfg, user)
    return cfg


def config_digest(cfg: Mapping[str, Any]) -> str:
    """Stable short hash of a resolved configuration."""
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# -- builders --------------------------------------------------------------


def build_network(cfg: Mapping[str, Any]) -> NetworkModel:
    net_cfg = cfg["network"]
    buses = net_cfg["buses"]
    bus_ids = sorted(int(b) for b in buses)
    p = [float(buses[b][0]) for b in bus_ids]
    q = [float(buses[b][1]) for b in bus_ids]
    branches = [Branch(int(f), int(t), float(r), float(x)) for f, t, r, x in net_cfg["branches"]]
    # load_scale is a system scale: the DG fleet shrinks with the loads and
    # the quadratic coefficient grows 1/s so marginal cost at matching
    # loading fractions is preserved
    s = float(net_cfg.get("load_scale", 1.0))
    dg = [
        DgUnit(int(u[0]), s * float(u[1]), s * float(u[2]), s * float(u[3]),
               float(u[4]), float(u[5]) / s)
        for u in net_cfg.get("dg_units", [])
    ]
    stations = [Station(int(s[0]), int(s[1]), float(s[2])) for s in net_cfg.get("stations", [])]
    return NetworkModel(
        bus_ids=bus_ids,
        p_load_kw=p,
        q_load_kvar=q,
        branches=branches,
        slack_bus=int(net_cfg.get("slack_bus", 1)),
        slack_voltage=float(net_cfg.get("slack_voltage", 1.0)),
        v_base_kv=float(net_cfg.get("v_base_kv", 12.66)),
        s_base_kva=float(net_cfg.get("s_base_kva", 100.0)),
        v_min=float(net_cfg.get("v_min", 0.94)),
        v_max=float(net_cfg.get("v_max", 1.10)),
        load_shape=net_cfg.get("load_shape"),
        load_scale=float(net_cfg.get("load_scale", 1.0)),
        dg_units=dg,
        stations=stations,
    )


def build_tariff(cfg: Mapping[str, Any]) -> TariffSchedule:
    t = cfg["tariff"]
    return label_periods(
        valley_price=float(t["valley_price"]),
        offpeak_price=float(t["offpeak_price"]),
        peak_price=float(t["peak_price"]),
        valley_hours=t["valley_hours"],
        peak_hours=t["peak_hours"],
    )


def build_pem(cfg: Mapping[str, Any]) -> ElasticityMatrix:
    return ElasticityMatrix(np.asarray(cfg["market"]["pem"], dtype=float))


def build_fleet_config(cfg: Mapping[str, Any]) -> FleetConfig:
    f = cfg["fleet"]
    types = tuple(
        BevTypeSpec(
            name=str(t["name"]),
            kwh_per_km=float(t["kwh_per_km"]),
            share=float(t["share"]),
            capacity_kwh=(float(t["capacity_kwh"][0]), float(t["capacity_kwh"][1])),
            power_factor=float(t["power_factor"]),
        )
        for t in f["bev_types"]
    )
    return FleetConfig(
        n_bevs=int(f["n_bevs"]),
        depart_mean_h=float(f["depart_mean_h"]),
        depart_std_h=float(f["depart_std_h"]),
        return_mean_h=float(f["return_mean_h"]),
        return_std_h=float(f["return_std_h"]),
        distance_log_mean=float(f["distance_log_mean"]),
        distance_log_std=float(f["distance_log_std"]),
        group_shares={str(k): float(v) for k, v in f["group_shares"].items()},
        soc_init_min=float(f["soc_init_min"]),
        soc_init_max=float(f["soc_init_max"]),
        eta_charge=float(f["eta_charge"]),
        eta_discharge=float(f["eta_discharge"]),
        max_hops=int(f["max_hops"]),
        bev_types=types,
    )


def build_degradation(cfg: Mapping[str, Any]) -> DegradationParams:
    b = cfg["battery"]
    return DegradationParams(
        cell_price=float(b["cell_price"]),
        labor_price=float(b["labor_price"]),
        cycle_life=float(b["cycle_life"]),
        dod=float(b["dod"]),
    )


def segment_groups(cfg: Mapping[str, Any]) -> tuple[dict[int, list[int]], dict[int, str]]:
    net_cfg = cfg["network"]
    segments = {int(s): [int(b) for b in buses] for s, buses in net_cfg["segments"].items()}
    groups = {int(s): str(g) for s, g in net_cfg["segment_groups"].items()}
    return segments, groups


def pv_profile(
    cfg: Mapping[str, Any],
    net: NetworkModel,
    rng: np.random.Generator,
    horizon: int = 24,
) -> np.ndarray:
    """Hourly PV output per bus [T, n_bus]: clear-sky half sine with one
    multiplicative noise draw per station-hour, truncated at zero."""
    p = cfg["pv"]
    sunrise, sunset = float(p["sunrise_h"]), float(p["sunset_h"])
    hours = np.arange(horizon) + 0.5
    shape = np.sin(np.pi * (hours - sunrise) / (sunset - sunrise))
    shape = np.where((hours > sunrise) & (hours < sunset), np.maximum(shape, 0.0), 0.0)
    out = np.zeros((horizon, net.n_bus))
    noise_std = float(p.get("noise_std", 0.0))
    for st in net.stations:
        noise = np.maximum(rng.normal(1.0, noise_std, size=horizon), 0.0) if noise_std > 0 else 1.0
        out[:, net.index(st.bus)] = st.pv_capacity_kw * shape * noise
    return out


@dataclass
class ScenarioConfig:
    """Everything one scenario run needs, resolved from config plus CLI."""

    name: str
    flags: ScenarioFlags
    seed: int
    population: int
    generations: int
    alpha: float
    rate_tier: str = "regular"
    n_workers: int = 1
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in SCENARIO_PRESETS and self.name != "custom":
            raise ConfigError(f"unknown scenario {self.name!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.rate_tier not in self.raw.get("optimizer", {}).get(
            "rate_tiers", {"slow": 0.5, "regular": 1.0, "fast": 1.5}
        ):
            raise ConfigError(f"unknown rate tier {self.rate_tier!r}")

    @property
    def rate_multiplier(self) -> float:
        tiers = self.raw.get("optimizer", {}).get("rate_tiers", {})
        return float(tiers.get(self.rate_tier, 1.0))

    @property
    def digest(self) -> str:
        return config_digest(
            {
                "config": self.raw,
                "scenario": self.name,
                "flags": vars(self.flags),
                "seed": self.seed,
                "population": self.population,
                "generations": self.generations,
                "alpha": self.alpha,
                "rate_tier": self.rate_tier,
            }
        )


def make_scenario(
    name: str,
    cfg: Mapping[str, Any],
    seed: int = 0,
    population: Optional[int] = None,
    generations: Optional[int] = None,
    alpha: float = 0.5,
    rate_tier: str = "regular",
    flags: Optional[ScenarioFlags] = None,
    n_workers: int = 1,
) -> ScenarioConfig:
    opt = cfg.get("optimizer", {})
    if flags is None:
        if name == "custom":
            raise ConfigError("custom scenarios need explicit flags")
        flags = SCENARIO_PRESETS[name]
    return ScenarioConfig(
        name=name,
        flags=flags,
        seed=int(seed),
        population=int(population if population is not None else opt.get("population", 100)),
        generations=int(
            generations if generations is not None else opt.get("generations", 200)
        ),
        alpha=float(alpha),
        rate_tier=rate_tier,
        n_workers=int(n_workers),
        raw=dict(cfg),
    )
