"""Independent reference computations used by the tests."""

from __future__ import annotations

import itertools

import numpy as np

from dnflex.fas import FasSignal, FlexEnvelope
from dnflex.network import STEP_HOURS, Branch, Network, Node


def fixed_point_pf(net: Network, injections, tol=1e-13, max_iter=2000):
    """Z-bus fixed-point power flow, vectorized over a leading batch axis.

    ``injections`` is (..., n_nodes) complex pu; returns voltages of the same shape.
    """
    s = np.asarray(injections, dtype=complex)
    sl = net.slack_index
    pq = [k for k in range(net.n_nodes) if k != sl]
    y = net.ybus
    z = np.linalg.inv(y[np.ix_(pq, pq)])
    y_s = y[pq, sl]
    v = np.ones(s.shape, dtype=complex)
    for _ in range(max_iter):
        i_inj = np.conj(s[..., pq] / v[..., pq])
        new = (i_inj - y_s) @ z.T
        step = np.max(np.abs(new - v[..., pq]))
        v[..., pq] = new
        if step < tol:
            return v
    raise RuntimeError("fixed-point power flow did not converge")


def chain_network(r=(0.05, 0.05), x_ratio=2.0, s_max=(1.0, 1.0), flexible=(True, True)) -> Network:
    nodes = [Node(0, "substation")] + [Node(k + 1, "prosumer", 5.0, 0.0, 10.0, f) for k, f in enumerate(flexible)]
    branches = [Branch(k, k + 1, rk, rk / x_ratio, sk) for k, (rk, sk) in enumerate(zip(r, s_max))]
    return Network(nodes, branches, 0)


def signal(n, **channels) -> FasSignal:
    z = np.zeros(n)
    return FasSignal(*(np.array(channels.get(k, z), float) for k in
                       ("lam_p_plus", "lam_p_minus", "lam_q_plus", "lam_q_minus")))


def envelope(loads, gens, **bounds) -> FlexEnvelope:
    n = len(gens)
    z = np.zeros(n)
    return FlexEnvelope(*(np.array(bounds.get(k, z), float) for k in
                          ("p_flex_max", "p_flex_min", "q_flex_max", "q_flex_min")),
                        gen_cap=np.array(bounds.get("gen_cap", gens), float),
                        load_cap=np.array(bounds.get("load_cap", np.real(loads)), float))


def brute_force_dispatch(net, loads, gens, fas: FasSignal, env: FlexEnvelope, cfg, step_kw=0.01):
    """Minimum objective over a ``step_kw`` grid of every open activation channel.

    Returns (sigma, activations dict) of the best feasible grid point.
    """
    loads = np.asarray(loads, complex)
    gens = np.asarray(gens, float)
    sl = net.slack_index
    axes, meta = [], []
    channels = (
        ("dp_plus", env.p_flex_max, fas.lam_p_plus, 1.0, 0.0, 1),
        ("dp_minus", env.p_flex_min, fas.lam_p_minus, 1.0, 0.0, -1),
        ("dq_plus", env.q_flex_max, fas.lam_q_plus, 0.0, 1.0, 1),
        ("dq_minus", env.q_flex_min, fas.lam_q_minus, 0.0, 1.0, -1),
        ("load_curt", env.load_cap, np.full(net.n_nodes, cfg.lambda_curt_load), 1.0, 0.0, 1),
        ("gen_curt", env.gen_cap, np.full(net.n_nodes, cfg.lambda_curt_gen), -1.0, 0.0, 1),
    )
    for kind, bound, price, cp, cq, sign in channels:
        for k in range(net.n_nodes):
            if k == sl or abs(bound[k]) <= 1e-7:
                continue
            n_steps = int(np.floor(abs(bound[k]) / step_kw + 1e-9))
            grid = sign * np.append(np.arange(n_steps + 1) * step_kw, abs(bound[k]))
            axes.append(np.unique(grid))
            meta.append((kind, k, price[k], cp, cq))
    base = (gens - loads.real) + 1j * (-loads.imag)
    if axes:
        mesh = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    else:
        mesh = np.zeros((1, 0))
    s = np.tile(base, (mesh.shape[0], 1))
    cost = np.zeros(mesh.shape[0])
    for j, (kind, k, price, cp, cq) in enumerate(meta):
        s[:, k] += (cp + 1j * cq) * mesh[:, j]
        cost += price * mesh[:, j] * STEP_HOURS
    v = fixed_point_pf(net, s / net.s_base_kva)
    vm = np.abs(v)
    vi, vj = v[:, net.f_idx], v[:, net.t_idx]
    y = net.g + 1j * net.b
    sf = vi * np.conj(y * (vi - vj))
    st = vj * np.conj(y * (vj - vi))
    loss = (sf.real + st.real).sum(axis=1) * net.s_base_kva
    mask = np.ones(net.n_nodes, bool)
    mask[sl] = False
    ok = np.all((vm[:, mask] <= cfg.v_max + 1e-12) & (vm[:, mask] >= cfg.v_min - 1e-12), axis=1)
    ok &= np.all(np.maximum(np.abs(sf), np.abs(st)) <= net.s_max * (1 + 1e-12), axis=1)
    sigma = cost + cfg.lambda_loss * loss * STEP_HOURS
    if not ok.any():
        return np.inf, {}
    best = int(np.argmin(np.where(ok, sigma, np.inf)))
    acts = {(kind, k): float(mesh[best, j]) for j, (kind, k, *_rest) in enumerate(meta)}
    return float(sigma[best]), acts


def kneedle_dense(f, x0, x1, n=200001):
    """Abscissa of maximum normalized chord distance for a continuous curve sampled densely."""
    x = np.linspace(x0, x1, n)
    y = f(x)
    xn = (x - x.min()) / np.ptp(x)
    yn = (y - y.min()) / np.ptp(y)
    d = np.abs((xn[-1] - xn[0]) * (yn - yn[0]) - (yn[-1] - yn[0]) * (xn - xn[0]))
    return float(x[np.argmax(d)])


def binary_enumeration(solve, n_gates):
    """Minimum objective over every assignment of explicit gate binaries."""
    best = np.inf
    for bits in itertools.product((0, 1), repeat=n_gates):
        best = min(best, solve(np.array(bits)))
    return best


def cvx_soc_relaxation(net, loads, gens, fas: FasSignal, env: FlexEnvelope, cfg):
    """The same relaxed program modelled in cvxpy and solved by CLARABEL; returns sigma."""
    import cvxpy as cp

    loads = np.asarray(loads, complex)
    gens = np.asarray(gens, float)
    n, sl, sb = net.n_nodes, net.slack_index, net.s_base_kva
    w = cp.Variable(n)
    c = cp.Variable(net.n_branches)
    s = cp.Variable(net.n_branches)
    dp = cp.Variable(n)
    dq = cp.Variable(n)
    lc = cp.Variable(n, nonneg=True)
    gc = cp.Variable(n, nonneg=True)
    mask = np.arange(n) != sl
    p_up, p_dn = cp.pos(dp), cp.neg(dp)
    q_up, q_dn = cp.pos(dq), cp.neg(dq)
    cons = [w[sl] == 1, w[mask] >= cfg.v_min ** 2, w[mask] <= cfg.v_max ** 2,
            dp <= env.p_flex_max, dp >= env.p_flex_min, dq <= env.q_flex_max, dq >= env.q_flex_min,
            lc <= env.load_cap, gc <= env.gen_cap]
    p_bus = [0] * n
    q_bus = [0] * n
    for k, (i, j) in enumerate(zip(net.f_idx, net.t_idx)):
        g, b = net.g[k], net.b[k]
        flows = ((i, g * (w[i] - c[k]) - b * s[k], -b * (w[i] - c[k]) - g * s[k]),
                 (j, g * (w[j] - c[k]) + b * s[k], -b * (w[j] - c[k]) + g * s[k]))
        for node, p, q in flows:
            p_bus[node] += p
            q_bus[node] += q
            cons.append(cp.SOC(net.s_max[k], cp.hstack([p, q])))
        cons.append(cp.SOC(w[i] + w[j], cp.hstack([2 * c[k], 2 * s[k], w[i] - w[j]])))
    for k in np.flatnonzero(mask):
        cons.append(p_bus[k] == (gens[k] - gc[k] - loads[k].real + lc[k] + dp[k]) / sb)
        cons.append(q_bus[k] == (-loads[k].imag + dq[k]) / sb)
    loss = sum(p_bus)
    price = (fas.lam_p_plus @ p_up + np.abs(fas.lam_p_minus) @ p_dn + fas.lam_q_plus @ q_up
             + np.abs(fas.lam_q_minus) @ q_dn + cfg.lambda_curt_load * cp.sum(lc[mask])
             + cfg.lambda_curt_gen * cp.sum(gc[mask]))
    prob = cp.Problem(cp.Minimize(STEP_HOURS * (price + cfg.lambda_loss * sb * loss)), cons)
    prob.solve(solver=cp.CLARABEL)
    return float(prob.value)
