"""Radial distribution network model and backward/forward sweep load flow.

Voltages are solved in per-unit on the network's voltage/power base; all
interface quantities are kW / kvar.  Injections follow the generator sign
convention: positive = power fed into the bus, loads enter negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np


class TopologyError(ValueError):
    """Branch data does not describe a tree rooted at the slack bus."""


class LoadFlowError(RuntimeError):
    """Sweep iteration failed to converge; carries the last voltage residual."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r_ohm: float
    x_ohm: float


@dataclass(frozen=True)
class DgUnit:
    """Dispatchable generator at a bus with quadratic cost a + b*P + c*P^2.

    cost_a is $/h, cost_b $/kWh, cost_c $/kW^2/h.
    """

    bus: int
    p_min_kw: float
    p_max_kw: float
    cost_a: float
    cost_b: float
    cost_c: float

    def cost(self, p_kw: float) -> float:
        return self.cost_a + self.cost_b * p_kw + self.cost_c * p_kw * p_kw

    def marginal(self, p_kw: float) -> float:
        return self.cost_b + 2.0 * self.cost_c * p_kw


@dataclass(frozen=True)
class Station:
    """Charging station: a bus, a simultaneous-plug limit and a PV canopy."""

    bus: int
    plugs: int
    pv_capacity_kw: float = 0.0


@dataclass
class FlowResult:
    """Converged load flow for one or more hourly snapshots.

    All arrays carry a leading time axis, length 1 for a single snapshot.
    """

    voltages: np.ndarray        # complex, [T, n_bus]
    losses_kw: np.ndarray       # [T]
    branch_p_kw: np.ndarray     # sending-end active power, [T, n_branch]
    grid_kw: np.ndarray         # net import through the slack bus, [T]
    iterations: int
    residual: float

    @property
    def vmag(self) -> np.ndarray:
        return np.abs(self.voltages)


class NetworkModel:
    """Radial feeder: buses, branches, snapshot loads, DG units and stations.

    The branch list must form a tree rooted at the slack bus; anything else
    raises TopologyError at construction.
    """

    def __init__(
        self,
        bus_ids: Sequence[int],
        p_load_kw: Sequence[float],
        q_load_kvar: Sequence[float],
        branches: Sequence[Branch],
        slack_bus: int = 1,
        slack_voltage: float = 1.0,
        v_base_kv: float = 12.66,
        s_base_kva: float = 100.0,
        v_min: float = 0.94,
        v_max: float = 1.10,
        load_shape: Optional[Sequence[float]] = None,
        load_scale: float = 1.0,
        dg_units: Sequence[DgUnit] = (),
        stations: Sequence[Station] = (),
    ):
        self.bus_ids = list(bus_ids)
        self.n_bus = len(self.bus_ids)
        self.p_load_kw = np.asarray(p_load_kw, dtype=float)
        self.q_load_kvar = np.asarray(q_load_kvar, dtype=float)
        if self.p_load_kw.shape != (self.n_bus,) or self.q_load_kvar.shape != (self.n_bus,):
            raise ValueError("load arrays must match the bus list")
        self.branches = list(branches)
        self.slack_bus = slack_bus
        self.slack_voltage = slack_voltage
        self.v_base_kv = v_base_kv
        self.s_base_kva = s_base_kva
        self.v_min = v_min
        self.v_max = v_max
        self.load_shape = None if load_shape is None else np.asarray(load_shape, dtype=float)
        self.load_scale = load_scale
        self.dg_units = list(dg_units)
        self.stations = list(stations)

        self._idx = {b: i for i, b in enumerate(self.bus_ids)}
        if len(self._idx) != self.n_bus:
            raise TopologyError("duplicate bus ids")
        if slack_bus not in self._idx:
            raise TopologyError(f"slack bus {slack_bus} not in bus list")
        self._build_tree()

        z_base_ohm = (self.v_base_kv * 1e3) ** 2 / (self.s_base_kva * 1e3)
        self._z_pu = np.array(
            [(br.r_ohm + 1j * br.x_ohm) / z_base_ohm for br in self._ordered_branches]
        )
        self._r_pu = self._z_pu.real

    # -- topology ---------------------------------------------------------

    def _build_tree(self) -> None:
        n = self.n_bus
        if len(self.branches) != n - 1:
            raise TopologyError(
                f"{len(self.branches)} branches for {n} buses; a radial feeder needs n-1"
            )
        adj: dict[int, list[tuple[int, Branch]]] = {b: [] for b in self.bus_ids}
        for br in self.branches:
            if br.from_bus not in self._idx or br.to_bus not in self._idx:
                raise TopologyError(f"branch {br.from_bus}-{br.to_bus} references unknown bus")
            adj[br.from_bus].append((br.to_bus, br))
            adj[br.to_bus].append((br.from_bus, br))

        # BFS from the slack; orient every branch parent -> child
        parent = np.full(n, -1, dtype=int)
        depth = np.full(n, -1, dtype=int)
        order: list[Branch] = []
        fidx: list[int] = []
        tidx: list[int] = []
        root = self._idx[self.slack_bus]
        depth[root] = 0
        queue = [self.slack_bus]
        seen = {self.slack_bus}
        while queue:
            bus = queue.pop(0)
            for nxt, br in adj[bus]:
                if nxt in seen:
                    continue
                seen.add(nxt)
                i, j = self._idx[bus], self._idx[nxt]
                parent[j] = i
                depth[j] = depth[i] + 1
                order.append(br)
                fidx.append(i)
                tidx.append(j)
                queue.append(nxt)
        if len(seen) != n:
            missing = [b for b in self.bus_ids if b not in seen]
            raise TopologyError(f"buses not reachable from slack: {missing}")

        self._parent = parent
        self._depth = depth
        self._ordered_branches = order
        self._from_idx = np.array(fidx, dtype=int)
        self._to_idx = np.array(tidx, dtype=int)

    def index(self, bus_id: int) -> int:
        return self._idx[bus_id]

    def hop_distance(self, bus_a: int, bus_b: int) -> int:
        """Number of branches on the tree path between two buses."""
        i, j = self._idx[bus_a], self._idx[bus_b]
        hops = 0
        while i != j:
            if self._depth[i] < self._depth[j]:
                j = self._parent[j]
            else:
                i = self._parent[i]
            hops += 1
        return hops

    def path_to_root(self, bus_id: int) -> list[int]:
        """Bus ids from the given bus up to the slack, inclusive."""
        i = self._idx[bus_id]
        path = [self.bus_ids[i]]
        while self._parent[i] >= 0:
            i = self._parent[i]
            path.append(self.bus_ids[i])
        return path

    # -- hourly load ------------------------------------------------------

    def hourly_loads(self) -> tuple[np.ndarray, np.ndarray]:
        """Snapshot loads expanded over the daily shape, [T, n_bus] in kW / kvar."""
        if self.load_shape is None:
            raise ValueError("network has no load shape configured")
        shape = self.load_shape[:, None] * self.load_scale
        return shape * self.p_load_kw[None, :], shape * self.q_load_kvar[None, :]


# -- load flow ------------------------------------------------------------


def solve_series(
    net: NetworkModel,
    p_inj_kw: np.ndarray,
    q_inj_kvar: Optional[np.ndarray] = None,
    tol: float = 1e-12,
    max_iter: int = 100,
) -> FlowResult:
    """Backward/forward sweep over a batch of independent hourly snapshots.

    p_inj_kw is [T, n_bus] net injection (generation positive).  Rows are
    solved independently; a row stops updating once its own voltage change
    falls below tol, so results do not depend on how rows are batched.
    """
    P = np.atleast_2d(np.asarray(p_inj_kw, dtype=float))
    if q_inj_kvar is None:
        Q = np.zeros_like(P)
    else:
        Q = np.atleast_2d(np.asarray(q_inj_kvar, dtype=float))
    if P.shape[1] != net.n_bus or Q.shape != P.shape:
        raise ValueError("injection arrays must be [T, n_bus]")

    T = P.shape[0]
    nbr = len(net._ordered_branches)
    f_idx, t_idx = net._from_idx, net._to_idx
    z = net._z_pu
    root = net.index(net.slack_bus)

    # drawn power per bus in p.u. (load convention inside the sweep)
    S_draw = -(P + 1j * Q) / net.s_base_kva

    V = np.full((T, net.n_bus), net.slack_voltage, dtype=complex)
    I_br = np.zeros((T, nbr), dtype=complex)
    active = np.ones(T, dtype=bool)
    residual = np.inf
    iterations = 0

    for iterations in range(1, max_iter + 1):
        rows = np.nonzero(active)[0]
        Va = V[rows]
        node_acc = np.conj(S_draw[rows] / Va)
        Ia = np.zeros((len(rows), nbr), dtype=complex)
        for k in range(nbr - 1, -1, -1):
            Ia[:, k] = node_acc[:, t_idx[k]]
            node_acc[:, f_idx[k]] += Ia[:, k]
        Vn = np.empty_like(Va)
        Vn[:, root] = net.slack_voltage
        for k in range(nbr):
            Vn[:, t_idx[k]] = Vn[:, f_idx[k]] - z[k] * Ia[:, k]
        dv = np.max(np.abs(Vn - Va), axis=1)
        V[rows] = Vn
        I_br[rows] = Ia
        residual = float(dv.max()) if dv.size else 0.0
        active[rows] = dv >= tol
        if not active.any():
            break
    if active.any():
        raise LoadFlowError(
            f"sweep did not converge in {max_iter} iterations", residual=residual
        )

    losses_kw = (np.abs(I_br) ** 2 * net._r_pu[None, :]).sum(axis=1) * net.s_base_kva
    v_from = V[:, f_idx]
    branch_p_kw = (v_from * np.conj(I_br)).real * net.s_base_kva
    # import through the slack: root branch sending power plus the slack bus's own draw
    root_mask = f_idx == root
    grid_kw = branch_p_kw[:, root_mask].sum(axis=1) - P[:, root]
    return FlowResult(
        voltages=V,
        losses_kw=losses_kw,
        branch_p_kw=branch_p_kw,
        grid_kw=grid_kw,
        iterations=iterations,
        residual=residual,
    )


def sweep_load_flow(
    net: NetworkModel,
    p_inj_kw: Sequence[float],
    q_inj_kvar: Optional[Sequence[float]] = None,
    tol: float = 1e-12,
    max_iter: int = 100,
) -> FlowResult:
    """Single-snapshot backward/forward sweep (thin wrapper over solve_series)."""
    q = None if q_inj_kvar is None else np.asarray(q_inj_kvar, dtype=float)[None, :]
    return solve_series(net, np.asarray(p_inj_kw, dtype=float)[None, :], q, tol, max_iter)


def net_injection(
    net: NetworkModel,
    base_p_kw: np.ndarray,
    base_q_kvar: np.ndarray,
    charge_kw: Optional[np.ndarray] = None,
    discharge_kw: Optional[np.ndarray] = None,
    dg_kw: Optional[np.ndarray] = None,
    pv_kw: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus net injection [T, n_bus]: DG + PV - base load - charging + discharging.

    BEV chargers, DG and PV run at unity power factor, so reactive injection
    is the negated base load only.  The slack bus absorbs whatever residual
    the flow solve produces.
    """
    P = -np.atleast_2d(np.asarray(base_p_kw, dtype=float)).copy()
    for term, sign in ((charge_kw, -1.0), (discharge_kw, 1.0), (dg_kw, 1.0), (pv_kw, 1.0)):
        if term is not None:
            P += sign * np.atleast_2d(np.asarray(term, dtype=float))
    Q = -np.atleast_2d(np.asarray(base_q_kvar, dtype=float))
    return P, Q


def loss_cost(losses_kw: np.ndarray, price_per_kwh: float, dt_h: float = 1.0) -> float:
    """Cost of feeder losses: price * sum of hourly loss energy."""
    return float(price_per_kwh * np.sum(np.asarray(losses_kw, dtype=float)) * dt_h)


def voltage_violations(
    flow: FlowResult,
    net: NetworkModel,
    v_min: Optional[float] = None,
    v_max: Optional[float] = None,
) -> list[tuple[int, int, float]]:
    """(bus_id, hour, magnitude) for every voltage outside [v_min, v_max].

    An empty list means the solution respects the voltage band.
    """
    lo = net.v_min if v_min is None else v_min
    hi = net.v_max if v_max is None else v_max
    vm = flow.vmag
    out: list[tuple[int, int, float]] = []
    for t, i in zip(*np.nonzero((vm < lo) | (vm > hi))):
        v = vm[t, i]
        mag = lo - v if v < lo else v - hi
        out.append((net.bus_ids[i], int(t), float(mag)))
    return out
