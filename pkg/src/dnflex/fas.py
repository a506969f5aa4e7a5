"""Flexibility activation signals: saturation levels, droop evaluation and gated envelopes."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import DegenerateTableError, ValidationError
from .network import Network, Profiles
from .powerflow import NetworkState
from .sensitivity import SensitivityTable


@dataclass(frozen=True)
class FasConfig:
    v_min: float = 0.92
    v_max: float = 1.08
    dv_perm: float = 0.04
    dt_perm: float = 75.0
    kappa_v: float = 0.2
    kappa_t: float = 0.2
    lambda_curt_gen: float = 0.47
    lambda_curt_load: float = 0.87
    # thermal level of the active channel scales with beta by default; False uses psi
    thermal_p_from_beta: bool = True

    def __post_init__(self):
        if not 0 < self.v_min < 1 < self.v_max:
            raise ValidationError("voltage limits must satisfy v_min < 1 < v_max")
        if not (0 < self.dv_perm < self.v_max - 1 and self.dv_perm < 1 - self.v_min):
            raise ValidationError("dv_perm must lie strictly inside both voltage margins")
        if not 0 < self.dt_perm < 100:
            raise ValidationError("dt_perm must lie in (0, 100)")
        if self.kappa_v < 0 or self.kappa_t < 0:
            raise ValidationError("kappa values must be non-negative")
        if not self.kappa_v + self.kappa_t < min(self.lambda_curt_gen, self.lambda_curt_load):
            raise ValidationError("kappa_v + kappa_t must stay below both curtailment prices")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SaturationLevels:
    vc_p: np.ndarray
    tc_p: np.ndarray
    vc_q: np.ndarray
    tc_q: np.ndarray


def _normalised(col: np.ndarray, kappa: float, name: str) -> np.ndarray:
    top = float(np.max(col)) if col.size else 0.0
    if top <= 0:
        if kappa > 0 and col.size:
            raise DegenerateTableError(f"{name} is identically zero but a level of {kappa} was requested")
        return np.zeros_like(col)
    return kappa * col / top


def saturation_levels(sens: SensitivityTable, cfg: FasConfig) -> SaturationLevels:
    psi, beta = np.asarray(sens.psi, float), np.asarray(sens.beta, float)
    if not (np.all(np.isfinite(psi)) and np.all(np.isfinite(beta))):
        raise ValidationError("sensitivities must be finite")
    thermal = beta if cfg.thermal_p_from_beta else psi
    return SaturationLevels(
        vc_p=_normalised(psi, cfg.kappa_v, "psi"),
        tc_p=_normalised(thermal, cfg.kappa_t, "beta" if cfg.thermal_p_from_beta else "psi"),
        vc_q=_normalised(psi, cfg.kappa_v, "psi"),
        tc_q=_normalised(beta, cfg.kappa_t, "beta"),
    )


def project_loadings(net: Network, state: NetworkState) -> np.ndarray:
    """Per-node signed loading: the incident branch with the largest |loading|."""
    out = np.zeros(net.n_nodes)
    load = state.loading_pct
    for k, inc in enumerate(net.adjacency):
        if k == net.slack_index or not inc:
            continue
        vals = np.array([load[e] for _, e in inc])
        out[k] = vals[np.argmax(np.abs(vals))]
    return out


def _ramp(x, start, end):
    """0 at ``start``, 1 at ``end`` (either order), clipped outside; exact at both joins."""
    x = np.asarray(x, dtype=float)
    frac = (x - start) / (end - start)
    return np.where(frac >= 1.0, 1.0, np.where(frac <= 0.0, 0.0, frac))


def droop_voltage(v, cfg: FasConfig):
    """(under-voltage, over-voltage) activation fractions in [0, 1]."""
    under = _ramp(v, 1.0 - cfg.dv_perm, cfg.v_min)
    over = _ramp(v, 1.0 + cfg.dv_perm, cfg.v_max)
    return under, over


def droop_thermal(t_pct, cfg: FasConfig):
    """(forward, reverse) overload fractions routed by loading sign."""
    frac = _ramp(np.abs(t_pct), cfg.dt_perm, 100.0)
    t_pct = np.asarray(t_pct, dtype=float)
    return np.where(t_pct > 0, frac, 0.0), np.where(t_pct < 0, frac, 0.0)


@dataclass(frozen=True)
class FasSignal:
    """Four-channel signal, arrays shaped (n_nodes,) or (n_nodes, T)."""

    lam_p_plus: np.ndarray
    lam_p_minus: np.ndarray
    lam_q_plus: np.ndarray
    lam_q_minus: np.ndarray

    @property
    def gates(self) -> tuple[np.ndarray, ...]:
        return tuple((a != 0).astype(int) for a in
                     (self.lam_p_plus, self.lam_p_minus, self.lam_q_plus, self.lam_q_minus))

    @property
    def horizon(self) -> int:
        return self.lam_p_plus.shape[1]

    def at(self, t: int) -> FasSignal:
        return FasSignal(*(getattr(self, f.name)[:, t] for f in fields(self)))

    def active(self) -> np.ndarray:
        """Boolean mask (same shape as a channel) of nonzero signal on any channel."""
        return (self.lam_p_plus != 0) | (self.lam_p_minus != 0) | (self.lam_q_plus != 0) | (self.lam_q_minus != 0)

    def without_reactive(self) -> FasSignal:
        zero = np.zeros_like(self.lam_q_plus)
        return FasSignal(self.lam_p_plus, self.lam_p_minus, zero, zero.copy())


def fas_from_measurements(v_mag, t_node, levels: SaturationLevels, cfg: FasConfig) -> FasSignal:
    """Evaluate the droop for node voltages and projected loadings of matching shape."""
    v_mag = np.asarray(v_mag, dtype=float)
    t_node = np.asarray(t_node, dtype=float)
    shape = (-1,) + (1,) * (v_mag.ndim - 1)
    vc_p, tc_p = levels.vc_p.reshape(shape), levels.tc_p.reshape(shape)
    vc_q, tc_q = levels.vc_q.reshape(shape), levels.tc_q.reshape(shape)
    under, over = droop_voltage(v_mag, cfg)
    fwd, rev = droop_thermal(t_node, cfg)
    return FasSignal(
        lam_p_plus=vc_p * under + tc_p * fwd,
        lam_p_minus=-(vc_p * over + tc_p * rev),
        lam_q_plus=vc_q * under + tc_q * fwd,
        lam_q_minus=-(vc_q * over + tc_q * rev),
    )


def compute_fas(net: Network, states: list[NetworkState], levels: SaturationLevels, cfg: FasConfig) -> FasSignal:
    v = np.stack([s.v_mag for s in states], axis=1)
    t_node = np.stack([project_loadings(net, s) for s in states], axis=1)
    return fas_from_measurements(v, t_node, levels, cfg)


@dataclass(frozen=True)
class FlexEnvelope:
    """Gated bounds in kW/kvar; arrays shaped like the FAS channels."""

    p_flex_max: np.ndarray
    p_flex_min: np.ndarray
    q_flex_max: np.ndarray
    q_flex_min: np.ndarray
    gen_cap: np.ndarray
    load_cap: np.ndarray

    def at(self, t: int) -> FlexEnvelope:
        return FlexEnvelope(*(getattr(self, f.name)[:, t] for f in fields(self)))


def raw_bounds(net: Network, profiles: Profiles, level_pct: float):
    """Ungated (p_max, p_min, q_max, q_min): +/- level% of instantaneous load at flexible nodes."""
    if level_pct < 0:
        raise ValidationError("flexibility level must be non-negative")
    mask = net.flexible_mask[:, None]
    p = np.where(mask, profiles.p_load_kw, 0.0) * level_pct / 100.0
    q = np.where(mask, np.abs(profiles.q_load_kvar), 0.0) * level_pct / 100.0
    return p, -p, q, -q


def gate_envelopes(fas: FasSignal, raw, profiles: Profiles) -> FlexEnvelope:
    p_max, p_min, q_max, q_min = (np.asarray(a, dtype=float) for a in raw)
    if (p_max < 0).any() or (q_max < 0).any() or (p_min > 0).any() or (q_min > 0).any():
        raise ValidationError("raw bounds must satisfy max >= 0 >= min")
    z1, z2, z3, z4 = fas.gates
    return FlexEnvelope(
        p_flex_max=z1 * p_max,
        p_flex_min=z2 * p_min,
        q_flex_max=z3 * q_max,
        q_flex_min=z4 * q_min,
        gen_cap=np.array(profiles.p_gen_kw, dtype=float),
        load_cap=np.array(profiles.p_load_kw, dtype=float),
    )


FAS_HEADER = ("t", "node", "lam_p_plus", "lam_p_minus", "lam_q_plus", "lam_q_minus", "z1", "z2", "z3", "z4")


def write_fas_csv(net: Network, fas: FasSignal, path) -> None:
    gates = fas.gates
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FAS_HEADER)
        for t in range(fas.horizon):
            for k, nid in enumerate(net.node_ids):
                chans = (fas.lam_p_plus, fas.lam_p_minus, fas.lam_q_plus, fas.lam_q_minus)
                w.writerow((t, nid, *(f"{c[k, t]:.10g}" for c in chans), *(int(g[k, t]) for g in gates)))
