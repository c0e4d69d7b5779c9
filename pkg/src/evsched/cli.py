"""Scenario runner and command line entry point.

Wires one full study pipeline: config -> network and fleet -> optional
retail price adjustment -> schedule search -> weighted pick -> artifact
files.  Every stage failure is re-raised tagged with the stage name and the
config digest, and artifact writes are atomic (temp file + rename) so a
failed run leaves nothing half-written behind.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import json
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import (
    SCENARIO_PRESETS,
    ConfigError,
    ScenarioConfig,
    build_degradation,
    build_fleet_config,
    build_network,
    build_pem,
    build_tariff,
    load_config,
    make_scenario,
    pv_profile,
    segment_groups,
)
from .fleet import allocate_counts, assign_fleet, build_fleet, fleet_to_csv
from .fleet import group_base_loads
from .market import RhoResult, elastic_demand, optimize_rho
from .metrics import REPORT_FIELDS, scenario_report
from .optimizer import (
    ParetoFront,
    SchedulingProblem,
    ScenarioFlags,
    build_problem,
    dumb_charging,
    evaluate_population,
    nsga2_run,
    select_weighted,
)
from .valuation import ScheduleSolution

# rng stream tags; far above any agent id so per-agent streams never collide
PV_STREAM = 1_000_003
GA_STREAM = 1_000_033

FLAG_NAMES = ("v2g", "bdc", "res", "oep", "erq")


class StageError(RuntimeError):
    """Pipeline failure tagged with the stage it happened in."""

    def __init__(self, stage: str, digest: str, cause: BaseException):
        super().__init__(f"[{stage}] config {digest}: {cause}")
        self.stage = stage
        self.digest = digest
        self.cause = cause


@contextlib.contextmanager
def _stage(name: str, digest: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, digest, exc) from exc


# -- artifact files --------------------------------------------------------


def _fmt(value) -> str:
    """Stable cell formatting: repr() floats survive a round trip exactly."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _np_item(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


class _Artifacts:
    """Writes run outputs atomically and can roll back everything on error."""

    def __init__(self, out_dir):
        self.out_dir = str(out_dir)
        self.written: list[str] = []

    def _land(self, name: str, write_fn) -> str:
        final = os.path.join(self.out_dir, name)
        tmp = final + ".tmp"
        try:
            write_fn(tmp)
            os.replace(tmp, final)
        finally:
            if os.path.exists(tmp):
                os.remove(tmp)
        self.written.append(final)
        return final

    def csv(self, name: str, header, rows) -> str:
        def write(path):
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(header)
                for row in rows:
                    writer.writerow([_fmt(v) for v in row])

        return self._land(name, write)

    def json(self, name: str, obj) -> str:
        payload = json.dumps(obj, indent=2, sort_keys=True, default=_np_item) + "\n"

        def write(path):
            with open(path, "w") as fh:
                fh.write(payload)

        return self._land(name, write)

    def rollback(self) -> None:
        for path in reversed(self.written):
            with contextlib.suppress(OSError):
                os.remove(path)
        self.written.clear()


# -- pipeline --------------------------------------------------------------


@dataclass
class RunResult:
    """Everything a solved scenario produced, before/after artifact output."""

    scenario: ScenarioConfig
    problem: SchedulingProblem
    agents: list
    tariff: object
    front: ParetoFront
    selected_index: int
    selected: ScheduleSolution
    rho: Optional[RhoResult]
    report: dict
    out_dir: Optional[str] = None


def run_scenario(scn: ScenarioConfig, out_dir=None) -> RunResult:
    """Solve one scenario end to end; write artifacts when out_dir is given."""
    digest = scn.digest
    cfg = scn.raw

    with _stage("config", digest):
        net = build_network(cfg)
        tariff0 = build_tariff(cfg)
        pem = build_pem(cfg)
        fcfg = build_fleet_config(cfg)
        degradation = build_degradation(cfg)
        mkt = cfg["market"]
        bat = cfg["battery"]
        opt = cfg.get("optimizer", {})

    with _stage("fleet", digest):
        segments, groups = segment_groups(cfg)
        base_loads = group_base_loads(net, segments, groups)
        counts = allocate_counts(fcfg.n_bevs, fcfg.group_shares, base_loads)
        agents = build_fleet(fcfg, counts, scn.seed, scn.rate_multiplier)
        assign_fleet(agents, net, tariff0, fcfg.max_hops)

    with _stage("pv", digest):
        pv = None
        if scn.flags.res:
            pv = pv_profile(cfg, net, np.random.default_rng([scn.seed, PV_STREAM]))

    def _problem(tariff) -> SchedulingProblem:
        return build_problem(
            agents,
            net,
            tariff,
            scn.flags,
            pv_kw=pv,
            eta_charge=fcfg.eta_charge,
            eta_discharge=fcfg.eta_discharge,
            soc_min=float(bat["soc_min"]),
            soc_max=float(bat["soc_max"]),
            reserve=float(bat["departure_reserve"]),
            strict_energy_accounting=bool(bat["strict_energy_accounting"]),
            pi_loss=float(mkt["pi_loss"]),
            emission_price=float(mkt["emission_price"]),
            e_gas=float(mkt["e_gas"]),
            e_th=float(mkt["e_th"]),
            degradation=degradation,
            grid_cap_kw=grid_cap,
            target_boost=target_boost,
        )

    # the import limit scales with the feeder like the DG fleet does
    sys_scale = float(cfg["network"].get("load_scale", 1.0))
    grid_cap = mkt.get("grid_cap_kw")
    grid_cap = float(grid_cap) * sys_scale if grid_cap is not None else None

    rho: Optional[RhoResult] = None
    target_boost = 1.0
    with _stage("pricing", digest):
        if scn.flags.oep:
            # the spread is tuned against the uncoordinated arrival-time
            # forecast: that surge is what the incentive exists to move
            prob0 = _problem(tariff0)
            a0, w0 = dumb_charging(prob0)
            sol0 = evaluate_population(prob0, a0[None], w0[None])[0]
            flex = np.zeros((prob0.horizon, net.n_bus))
            for i, b in enumerate(prob0.station_bus):
                flex[:, b] += sol0.p_charge_kw[i]
            base_p, base_q = net.hourly_loads()
            rho = optimize_rho(
                tariff0,
                pem,
                flex,
                net,
                base_p,
                base_q,
                pv_kw=pv,
                rho_min=float(mkt["rho_min"]),
                rho_max=float(mkt["rho_max"]),
                rho_step=float(mkt["rho_step"]),
                grid_cap_kw=grid_cap,
            )
            # station transactions stay on the published TOU prices; the
            # spread is the grid program's instrument, and its effect on the
            # fleet is behavioral: valley energy appetite grows by the
            # elastic factor at the chosen spread
            valley = tariff0.hours_in("valley")
            if valley.size:
                resp = elastic_demand(np.ones(tariff0.horizon), rho.tariff, pem)
                target_boost = float(resp[valley[0]])

    with _stage("problem", digest):
        prob = _problem(tariff0)

    with _stage("optimize", digest):
        if scn.name == "S1":
            # uncoordinated reference point: plug in and charge, no search
            a, w = dumb_charging(prob)
            front = ParetoFront(evaluate_population(prob, a[None], w[None]))
        else:
            front = nsga2_run(
                prob,
                population=scn.population,
                generations=scn.generations,
                rng=np.random.default_rng([scn.seed, GA_STREAM]),
                n_workers=scn.n_workers,
                crossover_prob=float(opt.get("crossover_prob", 0.9)),
                blend_alpha=float(opt.get("blend_alpha", 0.5)),
                seed_fraction=float(opt.get("seed_fraction", 0.5)),
            )

    with _stage("select", digest):
        selected_index, selected = select_weighted(front, scn.alpha)

    with _stage("report", digest):
        base_total = net.hourly_loads()[0].sum(axis=1)
        report = scenario_report(
            scn.name,
            scn.flags,
            front.f1,
            front.f2,
            selected,
            base_total,
            rho_star=None if rho is None else rho.rho_star,
            degraded=front.degraded,
        )

    result = RunResult(
        scenario=scn,
        problem=prob,
        agents=agents,
        tariff=tariff0,
        front=front,
        selected_index=selected_index,
        selected=selected,
        rho=rho,
        report=report,
        out_dir=None if out_dir is None else str(out_dir),
    )
    if out_dir is not None:
        with _stage("artifacts", digest):
            _write_artifacts(result, str(out_dir))
    return result


def _write_artifacts(res: RunResult, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    art = _Artifacts(out_dir)
    prob, sel = res.problem, res.selected
    try:
        art._land("fleet.csv", lambda p: fleet_to_csv(res.agents, p))

        t = res.tariff
        art.csv(
            "tariff.csv",
            ("hour", "period", "base_price", "price"),
            [
                (h, t.periods[h], t.base_price[h], t.price[h])
                for h in range(t.horizon)
            ],
        )

        art.json(
            "pareto.json",
            [
                {
                    "f1": s.f1,
                    "f2": s.f2,
                    "alpha_selected": i == res.selected_index,
                    "schedule_ref": (
                        "selected_schedule.csv" if i == res.selected_index else None
                    ),
                }
                for i, s in enumerate(res.front.solutions)
            ],
        )

        rows = []
        for i, agent in enumerate(prob.agents):
            for h in range(prob.horizon):
                rows.append(
                    (
                        agent.agent_id,
                        h,
                        int(sel.actions[i, h]),
                        sel.p_charge_kw[i, h],
                        sel.p_discharge_kw[i, h],
                        sel.soc_hour[i, h],
                    )
                )
        art.csv(
            "selected_schedule.csv",
            ("agent", "hour", "action", "charge_kw", "discharge_kw", "soc"),
            rows,
        )

        hours = [f"h{h:02d}" for h in range(prob.horizon)]
        art.csv(
            "voltages.csv",
            ("bus", *hours),
            [
                (prob.net.bus_ids[j], *sel.voltages[:, j])
                for j in range(prob.net.n_bus)
            ],
        )

        art.csv(
            "convergence.csv",
            ("generation", "hypervolume", "feasible_count"),
            [
                (h["generation"], h["hypervolume"], h["feasible"])
                for h in res.front.history
            ],
        )

        if res.rho is not None:
            art.csv(
                "rho_search.csv",
                ("rho", "c_tou", "gen_cost", "total_cost", "power_saved_kwh"),
                [
                    (
                        r["rho"],
                        r["c_tou"],
                        r["gen_cost"],
                        r["total_cost"],
                        r["power_saved_kwh"],
                    )
                    for r in res.rho.rows
                ],
            )

        art.csv("report.csv", REPORT_FIELDS, [[res.report[f] for f in REPORT_FIELDS]])
        art.json("report.json", res.report)

        art.json(
            "valuation.json",
            {
                "f1": sel.f1,
                "f2": sel.f2,
                "total_bev_cost": float(sel.bev_cost.sum()),
                "carbon_kg_ev": sel.carbon_kg_ev,
                "carbon_kg_cs": sel.carbon_kg_cs,
                "degradation_total": sel.degradation_total,
                "violations": sel.violations,
            },
        )
    except BaseException:
        art.rollback()
        raise


# -- parameter sweeps ------------------------------------------------------


def _rescenario(scn: ScenarioConfig, cfg: dict, rate_tier=None) -> ScenarioConfig:
    return make_scenario(
        scn.name,
        cfg,
        seed=scn.seed,
        population=scn.population,
        generations=scn.generations,
        alpha=scn.alpha,
        rate_tier=scn.rate_tier if rate_tier is None else rate_tier,
        flags=scn.flags,
        n_workers=scn.n_workers,
    )


def run_sweep(scn: ScenarioConfig, axis: str, out_dir) -> list[tuple]:
    """Re-run one scenario along a sweep axis, one subdirectory per point.

    The seed and every other setting stay fixed; only the swept quantity
    moves.  Returns [(label, value, RunResult)] and writes sweep.csv with
    one report row per point.
    """
    cfg = scn.raw
    sw = cfg.get("sweep", {})
    points: list[tuple] = []
    if axis == "carbon":
        start = float(sw.get("carbon_start", cfg["market"]["emission_price"]))
        step = float(sw.get("carbon_step", 0.03))
        count = int(sw.get("carbon_count", 4))
        for k in range(count):
            price = round(start + k * step, 10)
            c2 = copy.deepcopy(cfg)
            c2["market"]["emission_price"] = price
            points.append((f"carbon_{price:.2f}", price, _rescenario(scn, c2)))
    elif axis == "pem":
        for s in sw.get("pem_scales", (0.5, 1.0, 2.0)):
            c2 = copy.deepcopy(cfg)
            c2["market"]["pem"] = [
                [float(v) * float(s) for v in row] for row in cfg["market"]["pem"]
            ]
            points.append((f"pem_x{float(s):g}", float(s), _rescenario(scn, c2)))
    elif axis == "rate":
        for tier in sw.get("rate_tiers", ("slow", "regular", "fast")):
            c2 = copy.deepcopy(cfg)
            points.append((f"rate_{tier}", tier, _rescenario(scn, c2, rate_tier=tier)))
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")

    out_dir = str(out_dir)
    results = []
    rows = []
    for label, value, s2 in points:
        res = run_scenario(s2, os.path.join(out_dir, label))
        results.append((label, value, res))
        rows.append([axis, value] + [res.report[f] for f in REPORT_FIELDS])

    os.makedirs(out_dir, exist_ok=True)
    _Artifacts(out_dir).csv("sweep.csv", ("axis", "value", *REPORT_FIELDS), rows)
    return results


# -- command line ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evsched",
        description="Coordinated BEV charging/discharging study on a radial feeder.",
    )
    scenarios = sorted(SCENARIO_PRESETS) + ["custom"]
    parser.add_argument("--scenario", default="S7", choices=scenarios)
    parser.add_argument("--config", metavar="PATH", help="yaml overrides, deep-merged")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--population", type=int, metavar="N")
    parser.add_argument("--generations", type=int, metavar="N")
    parser.add_argument("--alpha", type=float, default=0.5, metavar="F",
                        help="weight on station benefit when picking from the front")
    parser.add_argument("--sweep", choices=("carbon", "pem", "rate"))
    parser.add_argument("--out", default="runs", metavar="DIR")
    parser.add_argument("--flags", metavar="LIST",
                        help="comma list for --scenario custom, e.g. v2g,bdc")
    parser.add_argument("--rate-tier", default="regular",
                        choices=("slow", "regular", "fast"))
    parser.add_argument("--workers", type=int, default=1, metavar="N")
    parser.add_argument("--n-bevs", type=int, metavar="N", help="override fleet size")
    return parser


def _parse_flags(spec: str) -> ScenarioFlags:
    names = [s.strip() for s in spec.split(",") if s.strip()]
    unknown = set(names) - set(FLAG_NAMES)
    if unknown:
        raise ConfigError(f"unknown flags: {sorted(unknown)}")
    return ScenarioFlags(**{n: n in names for n in FLAG_NAMES})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _stage("config", "-"):
            cfg = load_config(args.config)
            if args.n_bevs is not None:
                cfg = copy.deepcopy(cfg)
                cfg["fleet"]["n_bevs"] = int(args.n_bevs)
            flags = None
            if args.scenario == "custom":
                flags = _parse_flags(args.flags or "")
            scn = make_scenario(
                args.scenario,
                cfg,
                seed=args.seed,
                population=args.population,
                generations=args.generations,
                alpha=args.alpha,
                rate_tier=args.rate_tier,
                flags=flags,
                n_workers=args.workers,
            )

        if args.sweep:
            for label, value, res in run_sweep(scn, args.sweep, args.out):
                r = res.report
                print(
                    f"{scn.name} {label}: f1=${r['f1_selected']:.2f} "
                    f"f2=${r['f2_selected']:.2f} LF={r['load_factor']:.2f}%"
                )
            print(f"sweep rows -> {os.path.join(args.out, 'sweep.csv')}")
        else:
            res = run_scenario(scn, args.out)
            r = res.report
            print(
                f"{scn.name} seed={scn.seed} front={r['front_size']} "
                f"f1=${r['f1_selected']:.2f} f2=${r['f2_selected']:.2f} "
                f"LF={r['load_factor']:.2f}% -> {args.out}"
            )
            if r["degraded"]:
                print(
                    "warning: no feasible schedule found; "
                    "front holds the least-violating candidates",
                    file=sys.stderr,
                )
        return 0
    except StageError as err:
        print(f"evsched: {err}", file=sys.stderr)
        return 1
    except ConfigError as err:
        print(f"evsched: [config] {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
