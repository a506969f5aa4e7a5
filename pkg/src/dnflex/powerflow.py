"""Polar Newton-Raphson power flow and network-state snapshots."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConditioningError, DivergenceError, DnflexError, ValidationError
from .network import Network, Profiles

TOL = 1e-8
MAX_ITER = 50


@dataclass(frozen=True)
class NetworkState:
    t: int
    v_mag: np.ndarray
    v_ang: np.ndarray
    s_from: np.ndarray  # complex flow entering each branch at its ``from`` end (pu)
    s_to: np.ndarray  # same, at the ``to`` end
    loading_pct: np.ndarray  # signed: + when active power flows away from the substation
    branch_loss_kw: np.ndarray
    total_loss_kw: float
    slack_injection: complex
    mismatch: float
    iterations: int

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


def _mismatch(ybus, v, s_spec, pq):
    s_calc = v * np.conj(ybus @ v)
    d = s_spec - s_calc
    return np.concatenate([d.real[pq], d.imag[pq]])


def _norm(f, npq) -> float:
    """Largest complex power mismatch magnitude."""
    return float(np.max(np.hypot(f[:npq], f[npq:]))) if npq else 0.0


def _jacobian(ybus, v, pq):
    ibus = ybus @ v
    vnorm = v / np.abs(v)
    dv = np.diag(v)
    ds_dva = 1j * dv @ np.conj(np.diag(ibus) - ybus @ dv)
    ds_dvm = dv @ np.conj(ybus @ np.diag(vnorm)) + np.conj(np.diag(ibus)) @ np.diag(vnorm)
    a = ds_dva[np.ix_(pq, pq)]
    m = ds_dvm[np.ix_(pq, pq)]
    return np.block([[a.real, m.real], [a.imag, m.imag]])


def solve_power_flow(net: Network, injections, t: int = 0, v0=None) -> NetworkState:
    """Solve for nodal voltages given net complex injections (pu, generation positive).

    The slack entry of ``injections`` is ignored; the slack absorbs the residual.
    """
    s_spec = np.asarray(injections, dtype=complex)
    if s_spec.shape != (net.n_nodes,):
        raise ValidationError(f"expected {net.n_nodes} injections, got shape {s_spec.shape}")
    if not np.all(np.isfinite(s_spec)):
        raise ValidationError("injections must be finite")
    ybus = net.ybus
    sl = net.slack_index
    pq = np.array([k for k in range(net.n_nodes) if k != sl], dtype=int)
    v = np.ones(net.n_nodes, dtype=complex) if v0 is None else np.array(v0, dtype=complex)
    v[sl] = 1.0
    npq = len(pq)
    it = 0
    f = _mismatch(ybus, v, s_spec, pq)
    err = _norm(f, npq)
    while err >= TOL:
        if it >= MAX_ITER:
            raise DivergenceError(
                f"power flow did not converge in {MAX_ITER} iterations (mismatch {err:.3e})", err, t
            )
        jac = _jacobian(ybus, v, pq)
        try:
            dx = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError as exc:
            raise ConditioningError(f"singular power-flow Jacobian at t={t}") from exc
        if not np.all(np.isfinite(dx)):
            raise ConditioningError(f"non-finite Newton step at t={t}")
        va = np.angle(v)
        vm = np.abs(v)
        va[pq] += dx[:npq]
        vm[pq] += dx[npq:]
        if np.any(vm <= 0):
            raise DivergenceError(f"voltage collapse during Newton iterations at t={t}", err, t)
        v = vm * np.exp(1j * va)
        it += 1
        f = _mismatch(ybus, v, s_spec, pq)
        err = _norm(f, npq)
        if not np.isfinite(err):
            raise DivergenceError(f"power flow diverged at t={t}", err, t)
    return _state_from_voltage(net, v, t, err, it)


def branch_flows(net: Network, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y = net.g + 1j * net.b
    vi, vj = v[net.f_idx], v[net.t_idx]
    s_from = vi * np.conj(y * (vi - vj))
    s_to = vj * np.conj(y * (vj - vi))
    return s_from, s_to


def signed_loading(net: Network, s_from: np.ndarray, s_to: np.ndarray) -> np.ndarray:
    mag = np.maximum(np.abs(s_from), np.abs(s_to)) / net.s_max * 100.0
    away = np.where(net.downstream > 0, s_from.real, s_to.real)
    return np.where(away < 0, -mag, mag)


def _state_from_voltage(net, v, t, err, it):
    s_from, s_to = branch_flows(net, v)
    loss_kw = (s_from.real + s_to.real) * net.s_base_kva
    s_calc = v * np.conj(net.ybus @ v)
    return NetworkState(
        t=t,
        v_mag=np.abs(v),
        v_ang=np.angle(v),
        s_from=s_from,
        s_to=s_to,
        loading_pct=signed_loading(net, s_from, s_to),
        branch_loss_kw=loss_kw,
        total_loss_kw=float(loss_kw.sum()),
        slack_injection=complex(s_calc[net.slack_index]),
        mismatch=float(err),
        iterations=it,
    )


def simulate_horizon(net: Network, profiles: Profiles) -> list[NetworkState]:
    """Digital-twin run: one power flow per step without any flexible resource."""
    profiles.check_against(net)
    states = []
    for t in range(profiles.horizon):
        try:
            states.append(solve_power_flow(net, profiles.injections_pu(net, t), t=t))
        except DivergenceError as exc:
            exc.t = t
            raise
        except DnflexError as exc:
            raise type(exc)(f"t={t}: {exc}") from exc
    return states


def voltage_matrix(states: list[NetworkState]) -> np.ndarray:
    """(n_nodes, T) voltage magnitudes."""
    return np.stack([s.v_mag for s in states], axis=1)


def loading_matrix(states: list[NetworkState]) -> np.ndarray:
    """(n_branches, T) signed branch loadings in percent."""
    return np.stack([s.loading_pct for s in states], axis=1)


def write_state_dump(net: Network, states: list[NetworkState], voltage_path, branch_path) -> None:
    with open(voltage_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("t", "node", "v_mag", "v_ang"))
        for s in states:
            for k, nid in enumerate(net.node_ids):
                w.writerow((s.t, nid, f"{s.v_mag[k]:.10f}", f"{s.v_ang[k]:.10f}"))
    with open(branch_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("t", "from", "to", "p_pu", "q_pu", "loading_pct", "loss_kw"))
        for s in states:
            for k, br in enumerate(net.branches):
                w.writerow(
                    (s.t, br.from_node, br.to_node, f"{s.s_from[k].real:.10f}", f"{s.s_from[k].imag:.10f}",
                     f"{s.loading_pct[k]:.6f}", f"{s.branch_loss_kw[k]:.8f}")
                )
