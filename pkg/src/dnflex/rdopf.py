"""Resource-dispatch OPF: per-timestep flexibility and curtailment dispatch.

Two formulations share one instance builder:

* ``solve_soc_rdopf`` relaxes the branch equations to rotated second-order cones
  over the voltage-product variables (W_ii, Re W_ij, Im W_ij) and solves the
  cone program with :mod:`dnflex.conic`.
* ``solve_ac_rdopf`` solves the exact nonlinear problem in rectangular voltage
  coordinates with :mod:`dnflex.nlp`, warm-started from the SOC dispatch.

Money is in price units times kWh: a power of ``x`` pu held for one step costs
``price * x * s_base_kva * STEP_HOURS``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .conic import Cones, solve_socp
from .errors import DnflexError, InfeasibleError, SolverError, ValidationError, VerificationError
from .fas import FasConfig, FasSignal, FlexEnvelope
from .network import STEP_HOURS, Network
from .nlp import pdipm
from .powerflow import NetworkState, branch_flows, solve_power_flow

KINDS = ("dp_plus", "dp_minus", "dq_plus", "dq_minus", "load_curt", "gen_curt")
MIN_RANGE_PU = 1e-9
ZERO_KW = 1e-6  # interior-point iterates never reach a bound exactly; smaller activations are reported as 0
FEAS_TOL = 1e-6


@dataclass(frozen=True)
class RdopfConfig:
    lambda_loss: float = 0.0
    lambda_curt_gen: float = 0.47
    lambda_curt_load: float = 0.87
    v_min: float = 0.92
    v_max: float = 1.08
    gen_limits_kw: dict = field(default_factory=dict)  # node id -> (p_min, p_max) on P^g - curtailment
    kkt_tol: float = 1e-6
    cone_tol: float = 1e-8
    formulation: str = "SOC"

    def __post_init__(self):
        if not (self.lambda_loss >= 0 and math.isfinite(self.lambda_loss)):
            raise ValidationError("lambda_loss must be finite and non-negative")
        if self.lambda_curt_gen <= 0 or self.lambda_curt_load <= 0:
            raise ValidationError("curtailment prices must be positive")
        if not 0 < self.v_min < 1 < self.v_max:
            raise ValidationError("voltage limits must satisfy v_min < 1 < v_max")
        if self.formulation not in ("SOC", "AC"):
            raise ValidationError("formulation must be SOC or AC")

    @classmethod
    def from_fas(cls, fas_cfg: FasConfig, **overrides) -> RdopfConfig:
        base = dict(lambda_curt_gen=fas_cfg.lambda_curt_gen, lambda_curt_load=fas_cfg.lambda_curt_load,
                    v_min=fas_cfg.v_min, v_max=fas_cfg.v_max)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gen_limits_kw"] = {str(k): list(v) for k, v in self.gen_limits_kw.items()}
        return d


@dataclass
class DispatchResult:
    t: int
    formulation: str
    status: str
    objective: float  # sigma, price x kWh
    losses_kw: float
    dp_plus: np.ndarray  # kW per node
    dp_minus: np.ndarray
    dq_plus: np.ndarray  # kvar per node
    dq_minus: np.ndarray
    load_curt: np.ndarray
    gen_curt: np.ndarray
    duals: np.ndarray | None  # marginal sigma per kWh of extra load, per node
    v_mag: np.ndarray
    w_diag: np.ndarray | None = None
    cone_slack: np.ndarray | None = None  # W_ii W_jj - |W_ij|^2 per branch
    iterations: int = 0
    recovered: bool = False
    trace: list = field(default_factory=list, repr=False)
    loss_cost: float = 0.0  # lambda_loss share of the objective

    @property
    def activation_cost(self) -> float:
        return self.objective - self.loss_cost

    def net_injection_pu(self, net: Network, loads_t, gens_t) -> np.ndarray:
        """Complex injections after dispatch (generation positive)."""
        loads_t = np.asarray(loads_t, dtype=complex)
        p = (np.asarray(gens_t, float) - self.gen_curt - loads_t.real + self.load_curt
             + self.dp_plus + self.dp_minus)
        q = -loads_t.imag + self.dq_plus + self.dq_minus
        return (p + 1j * q) / net.s_base_kva


# --------------------------------------------------------------------------- instance


@dataclass
class _Instance:
    net: Network
    cfg: RdopfConfig
    t: int
    loads: np.ndarray  # complex kW + j kvar
    gens: np.ndarray  # kW
    p0: np.ndarray  # fixed net injection, pu
    q0: np.ndarray
    var_node: np.ndarray
    var_kind: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    price: np.ndarray
    cp: np.ndarray  # coefficient in the active balance (injection sense)
    cq: np.ndarray

    @property
    def scale(self) -> float:
        return self.net.s_base_kva * STEP_HOURS

    @property
    def cost(self) -> np.ndarray:
        return self.price * self.scale

    @property
    def c_loss(self) -> float:
        return self.cfg.lambda_loss * self.scale


def _instance(net: Network, loads_t, gens_t, fas_t: FasSignal, env_t: FlexEnvelope, cfg: RdopfConfig, t: int):
    n = net.n_nodes
    loads = np.asarray(loads_t, dtype=complex).reshape(-1)
    gens = np.asarray(gens_t, dtype=float).reshape(-1)
    chans = [np.asarray(getattr(fas_t, k), float).reshape(-1)
             for k in ("lam_p_plus", "lam_p_minus", "lam_q_plus", "lam_q_minus")]
    bounds = [np.asarray(getattr(env_t, k), float).reshape(-1)
              for k in ("p_flex_max", "p_flex_min", "q_flex_max", "q_flex_min", "gen_cap", "load_cap")]
    if any(a.shape != (n,) for a in [loads, gens, *chans, *bounds]):
        raise ValidationError(f"per-node inputs must have length {n}")
    if not all(np.all(np.isfinite(a)) for a in [loads, gens, *chans, *bounds]):
        raise ValidationError("dispatch inputs must be finite")
    if (gens < 0).any() or (loads.real < 0).any():
        raise ValidationError("loads and generation must be non-negative")
    lpp, lpm, lqp, lqm = chans
    pmax, pmin, qmax, qmin, gcap, lcap = bounds
    if (lpp < 0).any() or (lqp < 0).any() or (lpm > 0).any() or (lqm > 0).any():
        raise ValidationError("FAS channel signs violated")
    if (pmax < 0).any() or (qmax < 0).any() or (pmin > 0).any() or (qmin > 0).any():
        raise ValidationError("envelope signs violated")
    for lam, bnd, name in ((lpp, pmax, "p_plus"), (lpm, pmin, "p_minus"), (lqp, qmax, "q_plus"), (lqm, qmin, "q_minus")):
        if np.any((lam == 0) & (bnd != 0)):
            raise ValidationError(f"envelope {name} open where its gate is closed")
    top = max(float(np.max(np.abs(c))) for c in chans)
    if top >= min(cfg.lambda_curt_gen, cfg.lambda_curt_load):
        raise ValidationError("FAS saturation must stay below both curtailment prices")
    if (gcap > gens + 1e-12).any() or (lcap > loads.real + 1e-12).any() or (gcap < 0).any() or (lcap < 0).any():
        raise ValidationError("curtailment caps must lie within [0, instantaneous value]")

    gen_lo, gen_hi = np.zeros(n), gcap.copy()
    for nid, (pmin_kw, pmax_kw) in cfg.gen_limits_kw.items():
        k = net.index[int(nid)]
        gen_lo[k] = max(gen_lo[k], gens[k] - pmax_kw)
        gen_hi[k] = min(gen_hi[k], gens[k] - pmin_kw)
    if (gen_lo > gen_hi + 1e-12).any():
        raise InfeasibleError("generator limits cannot be met by curtailment")

    s = net.s_base_kva
    channels = (  # kind, lb, ub, price, cp, cq
        (0, np.zeros(n), pmax, lpp, 1.0, 0.0),
        (1, pmin, np.zeros(n), lpm, 1.0, 0.0),
        (2, np.zeros(n), qmax, lqp, 0.0, 1.0),
        (3, qmin, np.zeros(n), lqm, 0.0, 1.0),
        (4, np.zeros(n), lcap, np.full(n, cfg.lambda_curt_load), 1.0, 0.0),
        (5, gen_lo, gen_hi, np.full(n, cfg.lambda_curt_gen), -1.0, 0.0),
    )
    cols = {k: [] for k in ("node", "kind", "lb", "ub", "price", "cp", "cq")}
    fixed_p = np.zeros(n)
    for kind, lb, ub, price, cp, cq in channels:
        for k in range(n):
            if k == net.slack_index:
                continue
            lo, hi = lb[k] / s, ub[k] / s
            if hi - lo > MIN_RANGE_PU:
                for key, val in zip(cols, (k, kind, lo, hi, price[k], cp, cq)):
                    cols[key].append(val)
            elif kind == 5 and lo > 0:
                fixed_p[k] -= lo  # generator limit forces a fixed curtailment
    p0 = (gens - loads.real) / s + fixed_p
    q0 = -loads.imag / s
    return _Instance(net, cfg, t, loads, gens, p0, q0, np.array(cols["node"], int), np.array(cols["kind"], int),
                     np.array(cols["lb"], float), np.array(cols["ub"], float), np.array(cols["price"], float),
                     np.array(cols["cp"], float), np.array(cols["cq"], float))


def _activations(inst: _Instance, act_pu: np.ndarray) -> dict:
    n, s = inst.net.n_nodes, inst.net.s_base_kva
    out = {k: np.zeros(n) for k in KINDS}
    for j, (k, kind) in enumerate(zip(inst.var_node, inst.var_kind)):
        out[KINDS[kind]][k] += act_pu[j] * s
    for a in out.values():
        a[np.abs(a) < ZERO_KW] = 0.0
    # a generator limit narrower than zero width still curtails
    for nid, (pmin_kw, pmax_kw) in inst.cfg.gen_limits_kw.items():
        k = inst.net.index[int(nid)]
        lo = max(0.0, inst.gens[k] - pmax_kw)
        if not np.any((inst.var_node == k) & (inst.var_kind == 5)) and lo > 0:
            out["gen_curt"][k] = lo
    return out


def _sigma(inst: _Instance, act_pu: np.ndarray, loss_pu: float) -> tuple[float, float]:
    loss_cost = inst.c_loss * loss_pu
    return float(inst.cost @ act_pu + loss_cost), float(loss_cost)


def _dual_scale(inst: _Instance) -> float:
    return 1.0 / inst.scale


def _result(inst: _Instance, formulation: str, status: str, act_pu, loss_pu, v_mag, duals_pu, **extra):
    acts = _activations(inst, act_pu)
    sigma, loss_cost = _sigma(inst, act_pu, loss_pu)
    duals = None if duals_pu is None else np.asarray(duals_pu, float) * _dual_scale(inst)
    return DispatchResult(
        t=inst.t, formulation=formulation, status=status, objective=sigma,
        losses_kw=float(loss_pu * inst.net.s_base_kva), loss_cost=loss_cost,
        duals=duals, v_mag=np.asarray(v_mag, float), **acts, **extra,
    )


# --------------------------------------------------------------------------- nominal shortcut


def _limits_ok(net: Network, state: NetworkState, cfg: RdopfConfig, strict: bool) -> bool:
    v = np.delete(state.v_mag, net.slack_index)
    tol = 0.0 if strict else FEAS_TOL
    if strict:
        ok_v = np.all(v > cfg.v_min) and np.all(v < cfg.v_max)
        ok_l = np.all(np.abs(state.loading_pct) < 100.0)
    else:
        ok_v = np.all(v >= cfg.v_min - tol) and np.all(v <= cfg.v_max + tol)
        ok_l = np.all(np.abs(state.loading_pct) <= 100.0 * (1 + tol))
    dth = state.v_ang[net.f_idx] - state.v_ang[net.t_idx]
    th_min = np.array([b.theta_min for b in net.branches])
    th_max = np.array([b.theta_max for b in net.branches])
    ok_a = np.all(dth >= th_min - tol) and np.all(dth <= th_max + tol)
    return bool(ok_v and ok_l and ok_a)


def _nominal(inst: _Instance):
    """Power flow with zero activation, or None when it fails."""
    try:
        return solve_power_flow(inst.net, inst.p0 + 1j * inst.q0, t=inst.t)
    except DnflexError:
        return None


def _nominal_result(inst: _Instance, formulation: str, state: NetworkState) -> DispatchResult:
    """Zero activation is optimal when losses are free and the nominal state is strictly feasible."""
    net = inst.net
    w = state.v_mag**2
    vi = state.voltage
    wij = vi[net.f_idx] * np.conj(vi[net.t_idx])
    extra = {}
    if formulation == "SOC":
        extra = dict(w_diag=w, cone_slack=w[net.f_idx] * w[net.t_idx] - np.abs(wij) ** 2)
    loss_pu = state.total_loss_kw / net.s_base_kva
    return _result(inst, formulation, "optimal", np.zeros(inst.lb.size), loss_pu, state.v_mag,
                   np.zeros(net.n_nodes), **extra)


# --------------------------------------------------------------------------- SOC


def _soc_program(inst: _Instance):
    net = inst.net
    n, e, m = net.n_nodes, net.n_branches, inst.lb.size
    sl = net.slack_index
    fi, ti = net.f_idx, net.t_idx
    g, b = net.g, net.b
    iw, ir, ii, ia = 0, n, n + e, n + 2 * e
    nx = n + 2 * e + m
    eidx = np.arange(e)
    pq = np.array([k for k in range(n) if k != sl])

    def flow_rows(end_from: bool):
        """Rows (e, nx) of P and Q flow at one end of every branch."""
        P = np.zeros((e, nx))
        Q = np.zeros((e, nx))
        wcol = fi if end_from else ti
        sign = -1.0 if end_from else 1.0
        P[eidx, iw + wcol] = g
        P[eidx, ir + eidx] = -g
        P[eidx, ii + eidx] = sign * b
        Q[eidx, iw + wcol] = -b
        Q[eidx, ir + eidx] = b
        Q[eidx, ii + eidx] = sign * g
        return P, Q

    pf, qf = flow_rows(True)
    pt, qt = flow_rows(False)

    # equalities: W_slack = 1, then active and reactive balance at every non-slack node
    bal_p = np.zeros((n, nx))
    bal_q = np.zeros((n, nx))
    np.add.at(bal_p, fi, pf)
    np.add.at(bal_p, ti, pt)
    np.add.at(bal_q, fi, qf)
    np.add.at(bal_q, ti, qt)
    ja = ia + np.arange(m)
    bal_p[inst.var_node, ja] -= inst.cp
    bal_q[inst.var_node, ja] -= inst.cq
    a_slack = np.zeros((1, nx))
    a_slack[0, iw + sl] = 1.0
    A = np.vstack([a_slack, bal_p[pq], bal_q[pq]])
    bvec = np.concatenate([[1.0], inst.p0[pq], inst.q0[pq]])

    # orthant rows
    rows, rhs = [], []
    vw = np.zeros((len(pq), nx))
    vw[np.arange(len(pq)), iw + pq] = 1.0
    rows += [vw, -vw]
    rhs += [np.full(len(pq), inst.cfg.v_max**2), np.full(len(pq), -inst.cfg.v_min**2)]
    box = np.zeros((m, nx))
    box[np.arange(m), ja] = 1.0
    rows += [box, -box]
    rhs += [inst.ub, -inst.lb]
    tmin = np.tan([br.theta_min for br in net.branches])
    tmax = np.tan([br.theta_max for br in net.branches])
    ang_hi = np.zeros((e, nx))
    ang_hi[eidx, ii + eidx] = 1.0
    ang_hi[eidx, ir + eidx] = -tmax
    ang_lo = np.zeros((e, nx))
    ang_lo[eidx, ii + eidx] = -1.0
    ang_lo[eidx, ir + eidx] = tmin
    rows += [ang_hi, ang_lo]
    rhs += [np.zeros(e), np.zeros(e)]
    n_lin = sum(r.shape[0] for r in rows)

    # rotated cones (W_ii + W_jj, 2R, 2I, W_ii - W_jj), then thermal (s_max, P, Q) at both ends
    rot = np.zeros((e, 4, nx))
    rot[eidx, 0, iw + fi] = 1.0
    rot[eidx, 0, iw + ti] = 1.0
    rot[eidx, 1, ir + eidx] = 2.0
    rot[eidx, 2, ii + eidx] = 2.0
    rot[eidx, 3, iw + fi] = 1.0
    rot[eidx, 3, iw + ti] = -1.0
    therm = []
    for P, Q in ((pf, qf), (pt, qt)):
        blk = np.zeros((e, 3, nx))
        blk[:, 1] = P
        blk[:, 2] = Q
        therm.append(blk)
    therm = np.concatenate(therm)
    G = np.vstack(rows + [-rot.reshape(-1, nx), -therm.reshape(-1, nx)])
    h = np.concatenate(rhs + [np.zeros(4 * e), np.tile(np.array([1.0, 0.0, 0.0]), 2 * e) * np.repeat(np.tile(net.s_max, 2), 3)])
    cones = Cones(n_lin, (4,) * e + (3,) * (2 * e))

    c = np.zeros(nx)
    c[ja] = inst.cost
    if inst.c_loss:
        np.add.at(c, iw + fi, inst.c_loss * g)
        np.add.at(c, iw + ti, inst.c_loss * g)
        c[ir:ir + e] -= 2.0 * inst.c_loss * g
    layout = dict(iw=iw, ir=ir, ii=ii, ia=ia, pq=pq)
    return c, G, h, cones, A, bvec, layout


def solve_soc_rdopf(net: Network, loads_t, gens_t, fas_t: FasSignal, envelope_t: FlexEnvelope,
                    cfg: RdopfConfig | None = None, t: int = 0, use_shortcut: bool = True) -> DispatchResult:
    """SOC-relaxed dispatch for one timestep. ``loads_t`` is complex kW + j kvar per node."""
    cfg = cfg or RdopfConfig()
    inst = _instance(net, loads_t, gens_t, fas_t, envelope_t, cfg, t)
    if use_shortcut and cfg.lambda_loss == 0:
        state = _nominal(inst)
        if state is not None and _limits_ok(net, state, cfg, strict=True):
            return _nominal_result(inst, "SOC", state)
    return _solve_soc(inst)


def _solve_soc(inst: _Instance) -> DispatchResult:
    net = inst.net
    c, G, h, cones, A, bvec, lay = _soc_program(inst)
    tol = min(inst.cfg.cone_tol, inst.cfg.kkt_tol) * 0.1
    try:
        sol = solve_socp(c, G, h, cones, A, bvec, feastol=tol, abstol=tol, reltol=tol)
    except InfeasibleError as exc:
        raise InfeasibleError(f"t={inst.t}: dispatch infeasible even with full curtailment",
                              exc.certificate, exc.trace) from exc
    except SolverError as exc:
        raise SolverError(f"t={inst.t}: SOC solve failed: {exc}", exc.trace) from exc
    n, e = net.n_nodes, net.n_branches
    x = sol.x
    w = x[lay["iw"]:lay["iw"] + n]
    r = x[lay["ir"]:lay["ir"] + e]
    im = x[lay["ii"]:lay["ii"] + e]
    act = x[lay["ia"]:]
    loss_pu = float(np.sum(net.g * (w[net.f_idx] + w[net.t_idx] - 2 * r)))
    duals = np.zeros(n)
    pq = lay["pq"]
    duals[pq] = sol.y[1:1 + len(pq)]
    return _result(inst, "SOC", "optimal", act, loss_pu, np.sqrt(np.maximum(w, 0.0)), duals,
                   w_diag=w, cone_slack=w[net.f_idx] * w[net.t_idx] - r**2 - im**2,
                   iterations=sol.iterations, trace=sol.trace)


# --------------------------------------------------------------------------- AC

# local Hessians over (e_i, f_i, e_j, f_j)
_H_WI = np.diag([2.0, 2.0, 0.0, 0.0])
_H_WJ = np.diag([0.0, 0.0, 2.0, 2.0])
_H_R = np.zeros((4, 4))
_H_R[0, 2] = _H_R[2, 0] = _H_R[1, 3] = _H_R[3, 1] = 1.0
_H_I = np.zeros((4, 4))
_H_I[1, 2] = _H_I[2, 1] = 1.0
_H_I[0, 3] = _H_I[3, 0] = -1.0


class _AcModel:
    """Rectangular-coordinate model: x = (e at non-slack nodes, f at non-slack nodes, activations)."""

    def __init__(self, inst: _Instance):
        net = inst.net
        self.inst = inst
        n, self.e = net.n_nodes, net.n_branches
        sl = net.slack_index
        self.pq = np.array([k for k in range(n) if k != sl])
        self.nb = nb = len(self.pq)
        self.m = inst.lb.size
        self.nx = 2 * nb + self.m
        pos = np.full(n, -1)
        pos[self.pq] = np.arange(nb)
        self.pos = pos
        fi, ti = net.f_idx, net.t_idx
        col = lambda p, off: np.where(p >= 0, p + off, -1)  # noqa: E731
        self.loc = np.stack([col(pos[fi], 0), col(pos[fi], nb), col(pos[ti], 0), col(pos[ti], nb)], axis=1)
        self.row_f, self.row_t = pos[fi], pos[ti]
        g, b = net.g[:, None, None], net.b[:, None, None]
        self.h_pf = g * (_H_WI - _H_R) - b * _H_I
        self.h_qf = -b * (_H_WI - _H_R) - g * _H_I
        self.h_pt = g * (_H_WJ - _H_R) + b * _H_I
        self.h_qt = -b * (_H_WJ - _H_R) + g * _H_I
        self.h_loss = net.g[:, None, None] * (_H_WI + _H_WJ - 2 * _H_R)
        self.h_r = np.broadcast_to(_H_R, (self.e, 4, 4))
        self.h_i = np.broadcast_to(_H_I, (self.e, 4, 4))
        self.tmin = np.tan([br.theta_min for br in net.branches])
        self.tmax = np.tan([br.theta_max for br in net.branches])
        self.smax2 = net.s_max**2
        self.act_rows = pos[inst.var_node]

    def voltages(self, x):
        n = self.inst.net.n_nodes
        ev, fv = np.zeros(n), np.zeros(n)
        ev[self.inst.net.slack_index] = 1.0
        ev[self.pq] = x[:self.nb]
        fv[self.pq] = x[self.nb:2 * self.nb]
        return ev, fv

    def branch(self, x):
        net = self.inst.net
        ev, fv = self.voltages(x)
        ei, fi_, ej, fj = ev[net.f_idx], fv[net.f_idx], ev[net.t_idx], fv[net.t_idx]
        wi, wj = ei**2 + fi_**2, ej**2 + fj**2
        r = ei * ej + fi_ * fj
        im = fi_ * ej - ei * fj
        z = np.zeros_like(ei)
        d_wi = np.stack([2 * ei, 2 * fi_, z, z], axis=1)
        d_wj = np.stack([z, z, 2 * ej, 2 * fj], axis=1)
        d_r = np.stack([ej, fj, ei, fi_], axis=1)
        d_i = np.stack([-fj, ej, fi_, -ei], axis=1)
        g, b = net.g, net.b
        gc, bc = g[:, None], b[:, None]
        q = dict(
            wi=wi, wj=wj, r=r, i=im, d_r=d_r, d_i=d_i,
            pf=g * (wi - r) - b * im, qf=-b * (wi - r) - g * im,
            pt=g * (wj - r) + b * im, qt=-b * (wj - r) + g * im,
            d_pf=gc * (d_wi - d_r) - bc * d_i, d_qf=-bc * (d_wi - d_r) - gc * d_i,
            d_pt=gc * (d_wj - d_r) + bc * d_i, d_qt=-bc * (d_wj - d_r) + gc * d_i,
            loss=g * (wi + wj - 2 * r), d_loss=gc * (d_wi + d_wj - 2 * d_r),
        )
        return q

    def _scatter_rows(self, out, rows, grads):
        """out[rows[k], loc[k, c]] += grads[k, c] for valid rows and columns."""
        rr = np.broadcast_to(rows[:, None], self.loc.shape)
        mask = (rr >= 0) & (self.loc >= 0)
        np.add.at(out, (rr[mask], self.loc[mask]), grads[mask])

    def _scatter_cols(self, out, grads):
        """One row per branch: out[k, loc[k, c]] += grads[k, c]."""
        rows = np.broadcast_to(np.arange(self.e)[:, None], self.loc.shape)
        mask = self.loc >= 0
        np.add.at(out, (rows[mask], self.loc[mask]), grads[mask])

    def objective(self, x):
        q = self.branch(x)
        inst = self.inst
        f = float(inst.cost @ x[2 * self.nb:] + inst.c_loss * q["loss"].sum())
        df = np.zeros(self.nx)
        df[2 * self.nb:] = inst.cost
        if inst.c_loss:
            tmp = np.zeros((1, self.nx))
            self._scatter_rows(tmp, np.zeros(self.e, int), inst.c_loss * q["d_loss"])
            df += tmp[0]
        return f, df

    def constraints(self, x):
        inst, nb, m, e = self.inst, self.nb, self.m, self.e
        q = self.branch(x)
        ev, fv = self.voltages(x)
        act = x[2 * nb:]
        # equalities
        gp = np.zeros(inst.net.n_nodes)
        gq = np.zeros(inst.net.n_nodes)
        np.add.at(gp, inst.net.f_idx, q["pf"])
        np.add.at(gp, inst.net.t_idx, q["pt"])
        np.add.at(gq, inst.net.f_idx, q["qf"])
        np.add.at(gq, inst.net.t_idx, q["qt"])
        np.add.at(gp, inst.var_node, -inst.cp * act)
        np.add.at(gq, inst.var_node, -inst.cq * act)
        geq = np.concatenate([(gp - inst.p0)[self.pq], (gq - inst.q0)[self.pq]])
        dgp = np.zeros((nb, self.nx))
        dgq = np.zeros((nb, self.nx))
        self._scatter_rows(dgp, self.row_f, q["d_pf"])
        self._scatter_rows(dgp, self.row_t, q["d_pt"])
        self._scatter_rows(dgq, self.row_f, q["d_qf"])
        self._scatter_rows(dgq, self.row_t, q["d_qt"])
        ja = 2 * nb + np.arange(m)
        np.add.at(dgp, (self.act_rows, ja), -inst.cp)
        np.add.at(dgq, (self.act_rows, ja), -inst.cq)
        dg = np.vstack([dgp, dgq])

        # inequalities: voltage (low, high), thermal (from, to), angle (hi, lo), activation box (hi, lo)
        w = ev[self.pq] ** 2 + fv[self.pq] ** 2
        dw = np.zeros((nb, self.nx))
        dw[np.arange(nb), np.arange(nb)] = 2 * ev[self.pq]
        dw[np.arange(nb), nb + np.arange(nb)] = 2 * fv[self.pq]
        th_f = (q["pf"] ** 2 + q["qf"] ** 2) / self.smax2
        th_t = (q["pt"] ** 2 + q["qt"] ** 2) / self.smax2
        d_thf = np.zeros((e, self.nx))
        d_tht = np.zeros((e, self.nx))
        self._scatter_cols(d_thf, (2 * (q["pf"][:, None] * q["d_pf"] + q["qf"][:, None] * q["d_qf"])) / self.smax2[:, None])
        self._scatter_cols(d_tht, (2 * (q["pt"][:, None] * q["d_pt"] + q["qt"][:, None] * q["d_qt"])) / self.smax2[:, None])
        d_ahi = np.zeros((e, self.nx))
        d_alo = np.zeros((e, self.nx))
        self._scatter_cols(d_ahi, q["d_i"] - self.tmax[:, None] * q["d_r"])
        self._scatter_cols(d_alo, self.tmin[:, None] * q["d_r"] - q["d_i"])
        box = np.zeros((m, self.nx))
        box[np.arange(m), ja] = 1.0
        h = np.concatenate([
            inst.cfg.v_min**2 - w, w - inst.cfg.v_max**2,
            th_f - 1.0, th_t - 1.0,
            q["i"] - self.tmax * q["r"], self.tmin * q["r"] - q["i"],
            act - inst.ub, inst.lb - act,
        ])
        dh = np.vstack([-dw, dw, d_thf, d_tht, d_ahi, d_alo, box, -box])
        return h, geq, dh, dg

    def hessian(self, x, lam, mu):
        inst, nb, e = self.inst, self.nb, self.e
        q = self.branch(x)
        lp = np.zeros(inst.net.n_nodes)
        lq = np.zeros(inst.net.n_nodes)
        lp[self.pq] = lam[:nb]
        lq[self.pq] = lam[nb:]
        fi, ti = inst.net.f_idx, inst.net.t_idx
        w = lambda a: a[:, None, None]  # noqa: E731
        loc_h = (w(lp[fi]) * self.h_pf + w(lp[ti]) * self.h_pt
                 + w(lq[fi]) * self.h_qf + w(lq[ti]) * self.h_qt)
        o = 2 * nb
        mu_vlo, mu_vhi = mu[:nb], mu[nb:o]
        mu_tf, mu_tt = mu[o:o + e], mu[o + e:o + 2 * e]
        mu_ahi, mu_alo = mu[o + 2 * e:o + 3 * e], mu[o + 3 * e:o + 4 * e]
        for mu_t, pkey, qkey, hp, hq in ((mu_tf, "pf", "qf", self.h_pf, self.h_qf),
                                         (mu_tt, "pt", "qt", self.h_pt, self.h_qt)):
            dp, dq = q["d_" + pkey], q["d_" + qkey]
            outer = np.einsum("ki,kj->kij", dp, dp) + np.einsum("ki,kj->kij", dq, dq)
            curv = w(q[pkey]) * hp + w(q[qkey]) * hq
            loc_h += w(2 * mu_t / self.smax2) * (outer + curv)
        loc_h += w(mu_ahi) * (self.h_i - w(self.tmax) * self.h_r)
        loc_h += w(mu_alo) * (w(self.tmin) * self.h_r - self.h_i)
        if inst.c_loss:
            loc_h += inst.c_loss * self.h_loss
        hess = np.zeros((self.nx, self.nx))
        li = np.broadcast_to(self.loc[:, :, None], loc_h.shape)
        lj = np.broadcast_to(self.loc[:, None, :], loc_h.shape)
        mask = (li >= 0) & (lj >= 0)
        np.add.at(hess, (li[mask], lj[mask]), loc_h[mask])
        idx = np.arange(nb)
        diag = 2.0 * (mu_vhi - mu_vlo)
        hess[idx, idx] += diag
        hess[nb + idx, nb + idx] += diag
        return hess


def _warm_start(model: _AcModel, inst: _Instance, act: np.ndarray, v0=None) -> np.ndarray:
    net = inst.net
    p = inst.p0.copy()
    qv = inst.q0.copy()
    np.add.at(p, inst.var_node, inst.cp * act)
    np.add.at(qv, inst.var_node, inst.cq * act)
    try:
        v = solve_power_flow(net, p + 1j * qv, t=inst.t, v0=v0).voltage
    except DnflexError:
        v = np.ones(net.n_nodes, dtype=complex) if v0 is None else np.asarray(v0, complex)
    return np.concatenate([v.real[model.pq], v.imag[model.pq], act])


def solve_ac_rdopf(net: Network, loads_t, gens_t, fas_t: FasSignal, envelope_t: FlexEnvelope,
                   cfg: RdopfConfig | None = None, t: int = 0, soc: DispatchResult | None = None,
                   use_shortcut: bool = True) -> DispatchResult:
    """Nonlinear AC dispatch for one timestep, warm-started from the SOC dispatch."""
    cfg = cfg or RdopfConfig()
    inst = _instance(net, loads_t, gens_t, fas_t, envelope_t, cfg, t)
    nominal = _nominal(inst)
    if use_shortcut and cfg.lambda_loss == 0 and nominal is not None and _limits_ok(net, nominal, cfg, strict=True):
        return _nominal_result(inst, "AC", nominal)
    if soc is None:
        try:
            soc = _solve_soc(inst)
        except InfeasibleError:
            raise
        except SolverError:
            soc = None
    model = _AcModel(inst)
    act0 = _act_vector(inst, soc) if soc is not None else np.clip(np.zeros(inst.lb.size), inst.lb, inst.ub)
    x0 = _warm_start(model, inst, act0)
    tol = cfg.kkt_tol
    res = pdipm(model.objective, model.constraints, model.hessian, x0,
                feastol=min(cfg.cone_tol, 1e-9), gradtol=tol * 0.1, comptol=1e-10, costtol=1e-10)
    if res.converged:
        out = _ac_result(inst, model, res.x, res.lam, "optimal", res.iterations, res.trace)
        if verify_ac_feasibility(net, out, loads_t, gens_t, cfg).passed:
            return out
    if soc is None:
        raise SolverError(f"t={t}: AC solve failed ({res.message}) and no SOC dispatch to recover from", res.trace)
    rec = _recover(inst, soc, loads_t, gens_t, res.trace)
    if rec is None:
        raise SolverError(f"t={t}: AC solve failed ({res.message}) and the SOC dispatch is not AC feasible", res.trace)
    return rec


def _act_vector(inst: _Instance, res: DispatchResult) -> np.ndarray:
    s = inst.net.s_base_kva
    out = np.empty(inst.lb.size)
    for j, (k, kind) in enumerate(zip(inst.var_node, inst.var_kind)):
        out[j] = getattr(res, KINDS[kind])[k] / s
    return np.clip(out, inst.lb, inst.ub)


def _ac_result(inst, model: _AcModel, x, lam, status, iterations, trace, recovered=False):
    net = inst.net
    ev, fv = model.voltages(x)
    v = ev + 1j * fv
    s_from, s_to = branch_flows(net, v)
    loss_pu = float(np.sum(s_from.real + s_to.real))
    duals = np.zeros(net.n_nodes)
    duals[model.pq] = lam[:model.nb]
    return _result(inst, "AC", status, x[2 * model.nb:], loss_pu, np.abs(v), duals,
                   w_diag=np.abs(v) ** 2, iterations=iterations, recovered=recovered, trace=trace)


def _recover(inst: _Instance, soc: DispatchResult, loads_t, gens_t, trace):
    act = _act_vector(inst, soc)
    model = _AcModel(inst)
    x = _warm_start(model, inst, act)
    out = _ac_result(inst, model, x, np.zeros(2 * model.nb), "recovered", 0, trace, recovered=True)
    out.duals = None
    report = verify_ac_feasibility(inst.net, out, loads_t, gens_t, inst.cfg)
    return out if report.passed else None


# --------------------------------------------------------------------------- verification


@dataclass(frozen=True)
class VerificationReport:
    passed: bool
    max_v_violation: float  # pu beyond [v_min, v_max], 0 when inside
    max_loading_pct: float
    max_angle_violation: float
    mismatch: float
    state: NetworkState | None


def verify_ac_feasibility(net: Network, result: DispatchResult, loads_t, gens_t,
                          cfg: RdopfConfig | None = None) -> VerificationReport:
    """Replay the dispatched injections through an independent power flow."""
    cfg = cfg or RdopfConfig()
    inj = result.net_injection_pu(net, loads_t, gens_t)
    try:
        state = solve_power_flow(net, inj, t=result.t)
    except DnflexError as exc:
        raise VerificationError(f"t={result.t}: verification power flow failed: {exc}") from exc
    v = np.delete(state.v_mag, net.slack_index)
    v_viol = float(max(0.0, np.max(v - cfg.v_max), np.max(cfg.v_min - v))) if v.size else 0.0
    max_load = float(np.max(np.abs(state.loading_pct))) if net.n_branches else 0.0
    dth = state.v_ang[net.f_idx] - state.v_ang[net.t_idx]
    th_min = np.array([b.theta_min for b in net.branches])
    th_max = np.array([b.theta_max for b in net.branches])
    a_viol = float(max(0.0, np.max(dth - th_max), np.max(th_min - dth))) if net.n_branches else 0.0
    passed = v_viol <= FEAS_TOL and max_load <= 100.0 * (1 + FEAS_TOL) and a_viol <= FEAS_TOL
    return VerificationReport(passed, v_viol, max_load, a_viol, state.mismatch, state)


def extract_power_balance_duals(results) -> np.ndarray:
    """(n_nodes, T) active-balance duals from a sequence of SOC dispatch results."""
    cols = []
    for r in results:
        if r.duals is None or r.status != "optimal":
            raise SolverError(f"t={r.t}: dispatch has no converged duals")
        cols.append(r.duals)
    return np.stack(cols, axis=1)


# --------------------------------------------------------------------------- horizon


def dispatch_horizon(net: Network, profiles, fas: FasSignal, envelope: FlexEnvelope, cfg: RdopfConfig,
                     formulation: str | None = None, soc_results=None) -> list[DispatchResult]:
    """Independent per-timestep dispatch over the whole horizon."""
    formulation = formulation or cfg.formulation
    loads = profiles.p_load_kw + 1j * profiles.q_load_kvar
    out = []
    for t in range(profiles.horizon):
        args = (net, loads[:, t], profiles.p_gen_kw[:, t], fas.at(t), envelope.at(t), cfg, t)
        if formulation == "SOC":
            out.append(solve_soc_rdopf(*args))
        else:
            soc = soc_results[t] if soc_results is not None else None
            out.append(solve_ac_rdopf(*args, soc=soc))
    return out


DISPATCH_HEADER = ("t", "node", "dp_plus_kw", "dp_minus_kw", "dq_plus_kvar", "dq_minus_kvar",
                   "load_curt_kw", "gen_curt_kw", "dual")


def write_dispatch(net: Network, results: list[DispatchResult], csv_path, summary_path=None) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DISPATCH_HEADER)
        for r in results:
            for k, nid in enumerate(net.node_ids):
                dual = "" if r.duals is None else f"{r.duals[k]:.10g}"
                w.writerow((r.t, nid, *(f"{getattr(r, a)[k]:.10g}" for a in KINDS), dual))
    if summary_path is not None:
        summary = {
            "objective": float(sum(r.objective for r in results)),
            "losses_kwh": float(sum(r.losses_kw for r in results) * STEP_HOURS),
            "status": {str(r.t): r.status for r in results},
        }
        with open(summary_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
