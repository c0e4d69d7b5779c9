"""Independent reference implementations that pin the production code.

Deliberately textbook and slow: load flow by full Newton-Raphson (polar) and
by Gauss-Seidel on the bus admittance matrix, dispatch by brute-force grid
search, and scheduling instances small enough to enumerate outright.  None
of this shares solver code with the package; the toy-instance enumerator
reuses only the batched flow solver (whose own correctness is pinned by the
Newton-Raphson cross-check) to score candidate schedules.
"""

from __future__ import annotations

import numpy as np

from evsched.grid import Branch, NetworkModel, solve_series
from evsched.market import TariffSchedule
from evsched.optimizer import ScenarioFlags, SchedulingProblem
from evsched.fleet import BevAgent, BevBehavior


# -- admittance-matrix load flow -------------------------------------------


def ybus(net: NetworkModel) -> np.ndarray:
    """Bus admittance matrix in p.u. from the raw branch list."""
    z_base = (net.v_base_kv * 1e3) ** 2 / (net.s_base_kva * 1e3)
    Y = np.zeros((net.n_bus, net.n_bus), dtype=complex)
    for br in net.branches:
        y = 1.0 / ((br.r_ohm + 1j * br.x_ohm) / z_base)
        i, j = net.index(br.from_bus), net.index(br.to_bus)
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    return Y


def _injections_pu(net, p_inj_kw, q_inj_kvar):
    p = np.asarray(p_inj_kw, dtype=float)
    q = np.zeros_like(p) if q_inj_kvar is None else np.asarray(q_inj_kvar, dtype=float)
    return (p + 1j * q) / net.s_base_kva


def newton_raphson_flow(
    net: NetworkModel,
    p_inj_kw,
    q_inj_kvar=None,
    tol: float = 1e-10,
    max_iter: int = 60,
) -> tuple[np.ndarray, float]:
    """Full Newton-Raphson in polar coordinates for one snapshot.

    All non-slack buses are PQ.  Returns (complex bus voltages, total line
    losses in kW).
    """
    Y = ybus(net)
    G, B = Y.real, Y.imag
    n = net.n_bus
    s = net.index(net.slack_bus)
    S = _injections_pu(net, p_inj_kw, q_inj_kvar)
    Ps, Qs = S.real, S.imag
    pq = np.array([i for i in range(n) if i != s])

    vm = np.full(n, float(net.slack_voltage))
    va = np.zeros(n)

    for _ in range(max_iter):
        V = vm * np.exp(1j * va)
        Sc = V * np.conj(Y @ V)
        dP = Ps[pq] - Sc.real[pq]
        dQ = Qs[pq] - Sc.imag[pq]
        mism = np.concatenate([dP, dQ])
        if np.abs(mism).max() < tol:
            break

        # polar jacobian, textbook element formulas
        dth = va[:, None] - va[None, :]
        ct, st = np.cos(dth), np.sin(dth)
        P_calc, Q_calc = Sc.real, Sc.imag
        VmVm = vm[:, None] * vm[None, :]

        H = VmVm * (G * st - B * ct)            # dP/dtheta, off-diagonal
        np.fill_diagonal(H, -Q_calc - B.diagonal() * vm**2)
        N = vm[:, None] * (G * ct + B * st)     # dP/dVm
        np.fill_diagonal(N, P_calc / vm + G.diagonal() * vm)
        M = -VmVm * (G * ct + B * st)           # dQ/dtheta
        np.fill_diagonal(M, P_calc - G.diagonal() * vm**2)
        L = vm[:, None] * (G * st - B * ct)     # dQ/dVm
        np.fill_diagonal(L, Q_calc / vm - B.diagonal() * vm)

        J = np.block(
            [
                [H[np.ix_(pq, pq)], N[np.ix_(pq, pq)]],
                [M[np.ix_(pq, pq)], L[np.ix_(pq, pq)]],
            ]
        )
        step = np.linalg.solve(J, mism)
        va[pq] += step[: len(pq)]
        vm[pq] += step[len(pq):]
    else:
        raise RuntimeError("newton-raphson did not converge")

    V = vm * np.exp(1j * va)
    losses_kw = float((V * np.conj(Y @ V)).real.sum()) * net.s_base_kva
    return V, losses_kw


def gauss_seidel_flow(
    net: NetworkModel,
    p_inj_kw,
    q_inj_kvar=None,
    tol: float = 1e-10,
    max_iter: int = 50000,
) -> tuple[np.ndarray, float]:
    """Classic Gauss-Seidel on Ybus; slow but independent of everything else."""
    Y = ybus(net)
    n = net.n_bus
    s = net.index(net.slack_bus)
    S = _injections_pu(net, p_inj_kw, q_inj_kvar)
    V = np.full(n, complex(net.slack_voltage))

    for _ in range(max_iter):
        delta = 0.0
        for i in range(n):
            if i == s:
                continue
            acc = Y[i] @ V - Y[i, i] * V[i]
            v_new = (np.conj(S[i] / V[i]) - acc) / Y[i, i]
            delta = max(delta, abs(v_new - V[i]))
            V[i] = v_new
        if delta < tol:
            break
    else:
        raise RuntimeError("gauss-seidel did not converge")

    losses_kw = float((V * np.conj(Y @ V)).real.sum()) * net.s_base_kva
    return V, losses_kw


# -- brute-force dispatch --------------------------------------------------


def brute_force_dispatch(
    demand_kw: float,
    units,
    grid_price: float,
    step: float = 0.1,
    grid_cap_kw=None,
) -> tuple[float, np.ndarray, float]:
    """Exhaustive two-unit dispatch on a fixed power grid.

    Units produce at most the demand (no spill); the grid supplies the
    remainder at grid_price.  Fixed cost terms are charged unconditionally,
    matching the production convention.  Returns (cost, [p1, p2], p_grid).
    """
    assert len(units) == 2, "oracle is written for exactly two units"
    u1, u2 = units
    p1 = np.arange(u1.p_min_kw, u1.p_max_kw + step / 2, step)
    p2 = np.arange(u2.p_min_kw, u2.p_max_kw + step / 2, step)
    tot = p1[:, None] + p2[None, :]
    grid = demand_kw - tot
    ok = grid >= -1e-9
    if grid_cap_kw is not None:
        ok &= grid <= grid_cap_kw + 1e-9
    cost = (
        u1.cost_a + u1.cost_b * p1[:, None] + u1.cost_c * p1[:, None] ** 2
        + u2.cost_a + u2.cost_b * p2[None, :] + u2.cost_c * p2[None, :] ** 2
        + grid_price * np.maximum(grid, 0.0)
    )
    cost = np.where(ok, cost, np.inf)
    flat = int(np.argmin(cost))
    i, j = np.unravel_index(flat, cost.shape)
    return float(cost[i, j]), np.array([p1[i], p2[j]]), float(max(grid[i, j], 0.0))


# -- exhaustively enumerable scheduling instances --------------------------

TOY_LEVELS = (0.5, 1.0)
# per-hour choices: (action, power fraction); action 0 ignores the fraction
TOY_CHOICES = ((0, 0.0), (1, 0.5), (1, 1.0), (-1, 0.5), (-1, 1.0))


def toy_network(rng: np.random.Generator) -> NetworkModel:
    """Four-bus radial chain with modest random loads; loose voltage band."""
    loads_p = rng.uniform(40.0, 120.0, size=3)
    loads_q = loads_p * rng.uniform(0.3, 0.6, size=3)
    return NetworkModel(
        bus_ids=[1, 2, 3, 4],
        p_load_kw=[0.0, *loads_p],
        q_load_kvar=[0.0, *loads_q],
        branches=[
            Branch(1, 2, 0.20, 0.12),
            Branch(2, 3, 0.25, 0.15),
            Branch(3, 4, 0.30, 0.18),
        ],
        v_min=0.80,
        v_max=1.20,
    )


def toy_problem(seed: int) -> SchedulingProblem:
    """2 BEVs x 4-hour horizon x 2 power levels, repair-free by construction.

    Each BEV is plugged for a random 2-hour stretch of the horizon, as in
    the full model where plug-in windows cover part of the day.  Power caps
    are small enough that no choice sequence can hit the SOC window, and
    the departure target is the floor, so the search space seen by the GA
    is exactly the enumerable choice grid (5^2 per agent).
    """
    rng = np.random.default_rng(seed)
    net = toy_network(rng)
    T = 4
    # two price classes keep the front small: schedules that permute hours
    # within a class share revenue, so only their loss totals differ
    p_lo = rng.uniform(0.05, 0.09)
    p_hi = rng.uniform(0.12, 0.20)
    price = np.array([p_lo, p_lo, p_hi, p_hi])
    tariff = TariffSchedule(
        periods=("valley", "valley", "peak", "peak"),
        base_price=price,
        price=price.copy(),
    )

    n = 2
    K = 2
    # windows sit inside one price class each, so permuting a window never
    # moves revenue and the front stays small
    starts = 2 * rng.integers(0, 2, size=n)
    slot_hour = starts[:, None] + np.arange(K)[None, :]
    capacity = np.array([rng.uniform(18.0, 22.0), rng.uniform(26.0, 32.0)])
    soc_init = np.full(n, 0.5)
    # worst case is K full-power slots one way; keep it inside [0.05, 0.95]
    p_max = 0.9 * np.minimum(
        (0.95 - soc_init) * capacity / (K * 0.9),
        (soc_init - 0.05) * capacity / (K * 0.9),
    )
    agents = [
        BevAgent(
            agent_id=i,
            type_name="toy",
            behavior=BevBehavior(
                t_out=float(slot_hour[i, -1] + 1), t_back=float(slot_hour[i, 0]),
                distance_km=0.0,
                soc_initial=float(soc_init[i]), soc_initial_raw=float(soc_init[i]),
            ),
            capacity_kwh=float(capacity[i]),
            group="A",
            home_node=3 + i,
            max_power_kw=float(p_max[i]),
            trip_energy_kwh=0.0,
            station=3 + i,
        )
        for i in range(n)
    ]

    base_p = np.tile(net.p_load_kw, (T, 1))
    base_q = np.tile(net.q_load_kvar, (T, 1))
    return SchedulingProblem(
        net=net,
        tariff=tariff,
        flags=ScenarioFlags(v2g=True),
        agents=agents,
        slot_hour=slot_hour,
        slot_mask=np.ones((n, K), dtype=bool),
        n_slots=np.full(n, K),
        capacity=capacity,
        p_max=p_max,
        soc_init=soc_init,
        target=np.full(n, 0.05),
        target_reduced=np.zeros(n, dtype=bool),
        station_bus=np.array([net.index(a.station) for a in agents]),
        base_p_kw=base_p,
        base_q_kvar=base_q,
        pv_kw=np.zeros_like(base_p),
        power_levels=np.array(TOY_LEVELS),
    )


def enumerate_front(prob: SchedulingProblem) -> np.ndarray:
    """The exact Pareto set of a toy instance, by full enumeration.

    Walks every joint choice grid (5 choices per plug-in slot, idle outside
    the window) through per-agent revenue tables and a per-hour,
    per-choice-pair loss table (one batched flow solve), and returns the
    non-dominated (f1, f2) pairs sorted by f1.
    """
    T = prob.horizon
    n = prob.n_agents
    K = int(prob.n_slots[0])
    assert n == 2 and np.all(prob.n_slots == K), "enumeration is sized for 2 equal windows"
    n_choice = len(TOY_CHOICES)
    n_sched = n_choice**K                      # 25 per agent at K=2

    # base-5 digits give the choice per slot; spread onto the horizon with
    # idle (choice 0) outside each agent's window
    sched = np.arange(n_sched)
    digits = np.stack([(sched // n_choice**k) % n_choice for k in range(K)], axis=1)
    choice_h = np.zeros((n, n_sched, T), dtype=int)
    for i in range(n):
        choice_h[i][:, prob.slot_hour[i]] = digits

    act = np.array([c[0] for c in TOY_CHOICES])
    frac = np.array([c[1] for c in TOY_CHOICES])
    pc_choice = np.where(act == 1, frac, 0.0)   # charge fraction per choice
    pd_choice = np.where(act == -1, frac, 0.0)

    lam = prob.tariff.price
    f1_agent = np.empty((n, n_sched))
    for i in range(n):
        pc = pc_choice[choice_h[i]] * prob.p_max[i]  # [n_sched, T]
        pd = pd_choice[choice_h[i]] * prob.p_max[i]
        f1_agent[i] = ((pc - pd) * lam[None, :]).sum(axis=1) * prob.dt_h

    # hourly losses for every (choice_a, choice_b) pair: 25 pairs x T hours
    pair_a, pair_b = np.meshgrid(np.arange(n_choice), np.arange(n_choice), indexing="ij")
    pa, pb = pair_a.ravel(), pair_b.ravel()
    inj = np.repeat(-prob.base_p_kw, n_choice * n_choice, axis=0)
    inj_q = np.repeat(-prob.base_q_kvar, n_choice * n_choice, axis=0)
    hours = np.repeat(np.arange(T), n_choice * n_choice)
    b0, b1 = prob.station_bus
    net_a = (pd_choice - pc_choice)[np.tile(pa, T)] * prob.p_max[0]
    net_b = (pd_choice - pc_choice)[np.tile(pb, T)] * prob.p_max[1]
    inj[np.arange(len(hours)), b0] += net_a
    inj[np.arange(len(hours)), b1] += net_b
    flow = solve_series(prob.net, inj, inj_q)
    loss_table = flow.losses_kw.reshape(T, n_choice, n_choice)

    f1 = f1_agent[0][:, None] + f1_agent[1][None, :]
    f2 = np.zeros((n_sched, n_sched))
    for h in range(T):
        f2 = f2 + loss_table[h][choice_h[0, :, h][:, None], choice_h[1, :, h][None, :]]
    f2 = prob.pi_loss * f2 * prob.dt_h

    pts = np.stack([f1.ravel(), f2.ravel()], axis=1)
    return pareto_points(pts)


def pareto_points(pts: np.ndarray) -> np.ndarray:
    """Unique non-dominated rows of (maximise f1, minimise f2), f1-sorted.

    Staircase scan: after sorting by f1 descending (f2 ascending within
    ties), a point survives iff its f2 strictly improves the running best.
    That drops dominated points and objective-space duplicates in one pass.
    """
    order = np.lexsort((pts[:, 1], -pts[:, 0]))
    keep = []
    best_f2 = np.inf
    for f1v, f2v in pts[order]:
        if f2v < best_f2:
            keep.append((f1v, f2v))
            best_f2 = f2v
    return np.array(keep)[::-1]
