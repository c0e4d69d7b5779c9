"""Time-of-use tariff, demand elasticity and hourly economic dispatch.

The tariff partitions the day into peak / off-peak / valley periods with one
price per period.  An incentive spread rho raises the peak price and lowers
the valley price (floored at zero); elastic demand then shifts according to a
3x3 period elasticity matrix.  Generation is dispatched each hour by equal
incremental cost across the DG units with upstream grid import as the
unlimited marginal source.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .grid import DgUnit, NetworkModel, net_injection, solve_series

PERIOD_ORDER = ("peak", "offpeak", "valley")


class CapacityError(RuntimeError):
    """Demand cannot be balanced by the available units and grid import."""


@dataclass(frozen=True)
class TariffSchedule:
    """Hourly period labels with base and adjusted prices ($/kWh)."""

    periods: tuple[str, ...]          # length T, entries from PERIOD_ORDER
    base_price: np.ndarray            # [T]
    price: np.ndarray                 # [T], after any rho adjustment
    rho: float = 0.0

    def __post_init__(self):
        if len(self.periods) != len(self.base_price) or len(self.base_price) != len(self.price):
            raise ValueError("period labels and price arrays must align")
        for p in self.periods:
            if p not in PERIOD_ORDER:
                raise ValueError(f"unknown period label {p!r}")

    @property
    def horizon(self) -> int:
        return len(self.periods)

    def hours_in(self, period: str) -> np.ndarray:
        return np.array([t for t, p in enumerate(self.periods) if p == period], dtype=int)

    def mean_price(self, hours: Sequence[int]) -> float:
        hours = list(hours)
        if not hours:
            return float("nan")
        return float(self.price[hours].mean())

    def period_price(self, period: str, base: bool = False) -> float:
        hours = self.hours_in(period)
        if hours.size == 0:
            return float("nan")
        arr = self.base_price if base else self.price
        return float(arr[hours[0]])


def label_periods(
    valley_price: float = 0.06,
    offpeak_price: float = 0.10,
    peak_price: float = 0.14,
    valley_hours: Sequence[int] = tuple(range(8)),
    peak_hours: Sequence[int] = (10, 11, 12, 13, 18, 19, 20, 21),
    horizon: int = 24,
) -> TariffSchedule:
    """Build the base tariff: every hour gets a period label and its price."""
    valley = set(int(h) for h in valley_hours)
    peak = set(int(h) for h in peak_hours)
    if valley & peak:
        raise ValueError("valley and peak hour sets overlap")
    labels = []
    price = np.empty(horizon)
    for t in range(horizon):
        if t in valley:
            labels.append("valley")
            price[t] = valley_price
        elif t in peak:
            labels.append("peak")
            price[t] = peak_price
        else:
            labels.append("offpeak")
            price[t] = offpeak_price
    return TariffSchedule(tuple(labels), price, price.copy(), rho=0.0)


def adjust_prices(tariff: TariffSchedule, rho: float, rho_max: float = 20.0) -> TariffSchedule:
    """Apply the incentive spread: peak + rho, valley - rho floored at zero."""
    if rho < 0.0 or rho > rho_max:
        raise ValueError(f"rho={rho} outside [0, {rho_max}]")
    price = tariff.base_price.copy()
    for t, p in enumerate(tariff.periods):
        if p == "peak":
            price[t] = tariff.base_price[t] + rho
        elif p == "valley":
            price[t] = max(tariff.base_price[t] - rho, 0.0)
    return replace(tariff, price=price, rho=rho)


@dataclass(frozen=True)
class ElasticityMatrix:
    """Period-level price elasticity, indexed (peak, offpeak, valley)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (3, 3):
            raise ValueError("elasticity matrix must be 3x3")
        if np.any(np.diag(v) > 0):
            raise ValueError("self-elasticities must be non-positive")
        if np.any(v - np.diag(np.diag(v)) < 0):
            raise ValueError("cross-elasticities must be non-negative")
        object.__setattr__(self, "values", v)

    def scaled(self, k: float) -> "ElasticityMatrix":
        return ElasticityMatrix(self.values * k)


def elastic_demand(
    d0_kw: np.ndarray,
    tariff: TariffSchedule,
    pem: ElasticityMatrix,
) -> np.ndarray:
    """Shift hourly demand by the period-level relative price changes.

    d[t] = d0[t] * (1 + sum_p E[period(t), p] * (price(p) - base(p)) / base(p)),
    floored at zero.  Hours keep their own magnitude; only period-level price
    moves drive the adjustment.  With price == base_price this is the identity.
    """
    d0 = np.asarray(d0_kw, dtype=float)
    if d0.shape[-1] != tariff.horizon:
        raise ValueError("demand horizon does not match the tariff")
    rel = np.zeros(3)
    for k, period in enumerate(PERIOD_ORDER):
        hours = tariff.hours_in(period)
        if hours.size == 0:
            continue
        base = tariff.base_price[hours[0]]
        if base <= 0:
            raise ValueError(f"base price for {period} must be positive")
        rel[k] = (tariff.price[hours[0]] - base) / base
    period_idx = np.array([PERIOD_ORDER.index(p) for p in tariff.periods])
    factor = 1.0 + pem.values[period_idx] @ rel
    return np.maximum(d0 * factor, 0.0)


def tou_cost(
    d0_kw: np.ndarray,
    d_kw: np.ndarray,
    tariff: TariffSchedule,
) -> tuple[np.ndarray, float]:
    """Per-hour and total change in energy payments: price*d - base*d0."""
    d0 = np.asarray(d0_kw, dtype=float)
    d = np.asarray(d_kw, dtype=float)
    hourly = tariff.price * d - tariff.base_price * d0
    return hourly, float(hourly.sum())


# -- economic dispatch ----------------------------------------------------


@dataclass
class DispatchResult:
    p_units_kw: np.ndarray    # [n_units]
    p_grid_kw: float
    cost: float
    lam: float                # marginal cost at the solution


def _supply_at(lam: np.ndarray, pmin, pmax, b, c) -> np.ndarray:
    """Total unit output at marginal cost lam; lam may be a [T] vector."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(c > 0, (lam - b) / (2.0 * c), np.where(lam >= b, pmax, pmin))
    return np.clip(p, pmin, pmax)


def dispatch_hours(
    demand_kw: np.ndarray,
    units: Sequence[DgUnit],
    grid_price: np.ndarray,
    grid_cap_kw: Optional[float] = None,
    bisect_steps: int = 80,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Equal-incremental-cost dispatch for a vector of independent hours.

    Returns (p_units [T, n_units], p_grid [T], cost [T]).  For each hour the
    cheapest mix is: DG units up to the marginal cost of grid import, grid
    for the remainder.  Unit costs are convex (c >= 0).
    """
    demand = np.atleast_1d(np.asarray(demand_kw, dtype=float))
    gp = np.broadcast_to(np.asarray(grid_price, dtype=float), demand.shape).astype(float)
    if np.any(demand < 0):
        raise ValueError("dispatch demand must be non-negative")
    if not units:
        grid = demand.copy()
        if grid_cap_kw is not None and np.any(grid > grid_cap_kw + 1e-9):
            raise CapacityError("demand exceeds grid import limit")
        return np.zeros((demand.size, 0)), grid, gp * grid

    pmin = np.array([u.p_min_kw for u in units])
    pmax = np.array([u.p_max_kw for u in units])
    a = np.array([u.cost_a for u in units])
    b = np.array([u.cost_b for u in units])
    c = np.array([u.cost_c for u in units])
    if np.any(c < 0):
        raise ValueError("unit cost curvature must be non-negative")
    if np.any(pmin < 0) or np.any(pmax < pmin):
        raise ValueError("unit limits must satisfy 0 <= p_min <= p_max")

    if np.any(demand < pmin.sum() - 1e-9):
        raise CapacityError("demand below the minimum combined dispatch")
    cap = np.inf if grid_cap_kw is None else float(grid_cap_kw)
    if np.any(demand > pmax.sum() + cap + 1e-9):
        raise CapacityError("demand exceeds unit capacity plus grid import limit")

    T = demand.size
    # supply available from DG at the grid's marginal price, per hour
    dg_at_grid = _supply_at(gp, pmin, pmax, b, c).sum(axis=1)
    # three regimes per hour: DG-only (lam < grid price), grid-marginal
    # (lam = grid price), and capped import (lam rises into the DG tails)
    over_cap = demand - dg_at_grid > cap + 1e-12
    grid_marginal = ~over_cap & (dg_at_grid < demand - 1e-12)
    target = np.where(over_cap, demand - cap, demand)

    lo = np.full(T, b.min() - 1.0)
    hi = np.full(T, float((b + 2.0 * c * pmax).max()) + 1.0)
    for _ in range(bisect_steps):
        mid = 0.5 * (lo + hi)
        over = _supply_at(mid, pmin, pmax, b, c).sum(axis=1) >= target
        hi = np.where(over, mid, hi)
        lo = np.where(over, lo, mid)
    lam = np.where(grid_marginal, gp, hi)

    p_units = _supply_at(lam, pmin, pmax, b, c)
    p_grid = np.where(
        grid_marginal, demand - p_units.sum(axis=1), np.where(over_cap, cap, 0.0)
    )
    # fold the bisection residual into an interior unit so hours balance exactly
    residual = demand - p_units.sum(axis=1) - p_grid
    interior = (p_units > pmin + 1e-9) & (p_units < pmax - 1e-9)
    for t in np.nonzero(np.abs(residual) > 0)[0]:
        idx = np.nonzero(interior[t])[0]
        if idx.size:
            p_units[t, idx[0]] = np.clip(
                p_units[t, idx[0]] + residual[t], pmin[idx[0]], pmax[idx[0]]
            )
        elif grid_marginal[t] or (over_cap[t] and residual[t] < 0):
            p_grid[t] += residual[t]
    if grid_cap_kw is not None and np.any(p_grid > cap + 1e-9):
        raise CapacityError("dispatch requires grid import above the limit")

    cost = (a + b * p_units + c * p_units**2).sum(axis=1) + gp * p_grid
    return p_units, p_grid, cost


def economic_dispatch(
    demand_kw: float,
    units: Sequence[DgUnit],
    grid_price: float,
    grid_cap_kw: Optional[float] = None,
) -> DispatchResult:
    """Single-hour equal-incremental-cost dispatch."""
    p_units, p_grid, cost = dispatch_hours(
        np.array([demand_kw]), units, np.array([grid_price]), grid_cap_kw
    )
    at_cap = grid_cap_kw is not None and p_grid[0] >= grid_cap_kw - 1e-9
    marginal = grid_price if p_grid[0] > 0 and not at_cap else float(
        max(
            (u.marginal(p) for u, p in zip(units, p_units[0]) if p > u.p_min_kw + 1e-9),
            default=min((u.cost_b for u in units), default=grid_price),
        )
    )
    return DispatchResult(p_units[0], float(p_grid[0]), float(cost[0]), marginal)


# -- incentive spread line search -----------------------------------------


@dataclass
class RhoResult:
    rho_star: float
    tariff: TariffSchedule
    total_cost: float
    rows: list[dict] = field(default_factory=list)   # one diagnostics row per rho
    power_saved_kwh: float = 0.0


def optimize_rho(
    tariff: TariffSchedule,
    pem: ElasticityMatrix,
    flexible_kw: np.ndarray,
    net: NetworkModel,
    base_p_kw: np.ndarray,
    base_q_kvar: np.ndarray,
    pv_kw: Optional[np.ndarray] = None,
    rho_min: float = 0.0,
    rho_max: float = 20.0,
    rho_step: float = 0.25,
    grid_cap_kw: Optional[float] = None,
) -> RhoResult:
    """Grid line search for the incentive spread minimising system cost.

    flexible_kw is the price-responsive load per station bus, [T, n_bus]
    (only station columns non-zero).  For each candidate rho the flexible
    load shifts via the elasticity matrix, feeder losses are re-solved, the
    DG/grid dispatch is re-run on total demand plus losses, and the score is
    generation cost plus the change in flexible-load energy payments.  Ties
    resolve toward the smaller rho.

    Procurement is priced at the baseline tariff: the spread is a retail
    instrument, so discounting the valley does not make wholesale energy
    cheaper.  The spread earns its keep only while peak shedding relieves
    the import limit; past that point the payment distortion dominates and
    the score turns back up.
    """
    flex0 = np.atleast_2d(np.asarray(flexible_kw, dtype=float))
    base_p = np.atleast_2d(np.asarray(base_p_kw, dtype=float))
    base_q = np.atleast_2d(np.asarray(base_q_kvar, dtype=float))
    T = flex0.shape[0]
    rhos = np.arange(rho_min, rho_max + 1e-9, rho_step)
    d0_total = flex0.sum(axis=1)

    # all candidate rhos share one batched flow solve: stack (rho, hour) rows
    tariffs = [adjust_prices(tariff, float(r), rho_max) for r in rhos]
    factors = np.empty((len(rhos), T))
    for i, tr in enumerate(tariffs):
        with np.errstate(divide="ignore", invalid="ignore"):
            shifted = elastic_demand(d0_total, tr, pem)
        factors[i] = np.divide(
            shifted, d0_total, out=np.ones_like(shifted), where=d0_total > 0
        )
    flex_all = factors[:, :, None] * flex0[None, :, :]           # [R, T, n_bus]
    inj_p = np.repeat(base_p[None, :, :], len(rhos), axis=0) * -1.0
    inj_p -= flex_all
    if pv_kw is not None:
        inj_p += np.atleast_2d(np.asarray(pv_kw, dtype=float))[None, :, :]
    inj_q = np.repeat(-base_q[None, :, :], len(rhos), axis=0)
    flow = solve_series(net, inj_p.reshape(-1, net.n_bus), inj_q.reshape(-1, net.n_bus))
    losses = flow.losses_kw.reshape(len(rhos), T)

    pv_total = 0.0 if pv_kw is None else np.atleast_2d(pv_kw).sum(axis=1)
    rows: list[dict] = []
    best = None
    for i, (r, tr) in enumerate(zip(rhos, tariffs)):
        d_total = factors[i] * d0_total
        _, c_tou = tou_cost(d0_total, d_total, tr)
        demand = np.maximum(base_p.sum(axis=1) + d_total + losses[i] - pv_total, 0.0)
        try:
            _, _, gen_cost = dispatch_hours(
                demand, net.dg_units, tr.base_price, grid_cap_kw
            )
            gen_total = float(gen_cost.sum())
        except CapacityError:
            # candidate shifts demand beyond what the system can serve
            gen_total = float("inf")
        peak_hours = tr.hours_in("peak")
        saved = float(np.maximum(d0_total[peak_hours] - d_total[peak_hours], 0.0).sum())
        total = gen_total + c_tou
        rows.append(
            {
                "rho": float(r),
                "c_tou": float(c_tou),
                "gen_cost": gen_total,
                "total_cost": total,
                "power_saved_kwh": saved,
            }
        )
        if best is None or total < best[0] - 1e-12:
            best = (total, i)

    _, i_best = best
    return RhoResult(
        rho_star=float(rhos[i_best]),
        tariff=tariffs[i_best],
        total_cost=rows[i_best]["total_cost"],
        rows=rows,
        power_saved_kwh=rows[i_best]["power_saved_kwh"],
    )
