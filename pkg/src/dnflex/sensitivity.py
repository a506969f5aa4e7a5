"""Nodal voltage sensitivities by perturb-and-observe Monte Carlo."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DnflexError, EstimationError, ValidationError
from .network import Network
from .powerflow import NetworkState, solve_power_flow

CHANNELS = ("active", "reactive")
MAX_SKIP_FRACTION = 0.20


@dataclass(frozen=True)
class SensitivityTable:
    node_ids: tuple[int, ...]
    psi: np.ndarray
    beta: np.ndarray
    num_scenarios: int
    skipped: int
    psi_samples: np.ndarray  # (accepted scenarios, n_nodes)
    beta_samples: np.ndarray

    def __post_init__(self):
        for name in ("psi", "beta", "psi_samples", "beta_samples"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if (self.psi < 0).any() or (self.beta < 0).any():
            raise ValidationError("sensitivities must be non-negative")

    def value(self, node_id: int) -> tuple[float, float]:
        k = self.node_ids.index(node_id)
        return float(self.psi[k]), float(self.beta[k])


@dataclass(frozen=True)
class LoadScenarioSampler:
    """Random loading scenarios: each prosumer load drawn log-uniformly below its peak.

    Loads span ``decades`` orders of magnitude, ``[peak * 10**-decades, peak]``,
    with reactive load at ``power_factor`` and no generation.
    """

    seed: int = 0
    decades: float = 3.0
    power_factor: float = 0.98

    def draw(self, net: Network, count: int) -> np.ndarray:
        """(count, n_nodes) complex injections in pu."""
        rng = np.random.default_rng(self.seed)
        peak = np.array([n.peak_load_kw for n in net.nodes])
        expo = rng.uniform(-self.decades, 0.0, size=(count, net.n_nodes))
        p = np.where(peak > 0, peak * 10.0**expo, 0.0) / net.s_base_kva
        q = p * math.tan(math.acos(self.power_factor))
        return -(p + 1j * q)


def perturb_observe(net: Network, base_injections, node_id: int, delta: float, channel: str = "active",
                    base_state: NetworkState | None = None) -> np.ndarray:
    """|V_i(perturbed) - V_i(base)| / |delta| for every node i.

    ``delta`` is a signed load increase in pu at ``node_id`` on the given channel.
    """
    if channel not in CHANNELS:
        raise ValidationError(f"channel must be one of {CHANNELS}")
    if not delta or not math.isfinite(delta):
        raise ValidationError("delta must be nonzero and finite")
    base_injections = np.asarray(base_injections, dtype=complex)
    if net.index[node_id] == net.slack_index:
        return np.zeros(net.n_nodes)  # the slack absorbs any change at fixed voltage
    if base_state is None:
        base_state = solve_power_flow(net, base_injections)
    s = base_injections.copy()
    s[net.index[node_id]] -= delta if channel == "active" else 1j * delta
    pert = solve_power_flow(net, s, v0=base_state.voltage)
    return np.abs(pert.v_mag - base_state.v_mag) / abs(delta)


def estimate_nvs(net: Network, sampler: LoadScenarioSampler | None = None, U: int = 100,
                 delta_kw: float = 1.0) -> SensitivityTable:
    """Mean over ``U`` scenarios of the network-summed sensitivity of each flexible node."""
    if U < 1:
        raise ValidationError("U must be at least 1")
    if not delta_kw or not math.isfinite(delta_kw):
        raise ValidationError("delta must be nonzero and finite")
    sampler = sampler or LoadScenarioSampler()
    delta = delta_kw / net.s_base_kva
    flexible = [k for k in range(net.n_nodes) if net.flexible_mask[k] and k != net.slack_index]
    psi_rows, beta_rows = [], []
    skipped = 0
    for k, inj in enumerate(sampler.draw(net, U)):
        psi_k = np.zeros(net.n_nodes)
        beta_k = np.zeros(net.n_nodes)
        try:
            base = solve_power_flow(net, inj, t=k)
            for x in flexible:
                nid = net.node_ids[x]
                psi_k[x] = perturb_observe(net, inj, nid, delta, "active", base).sum()
                beta_k[x] = perturb_observe(net, inj, nid, delta, "reactive", base).sum()
        except DnflexError:
            skipped += 1
            continue
        psi_rows.append(psi_k)
        beta_rows.append(beta_k)
    if skipped > MAX_SKIP_FRACTION * U or not psi_rows:
        raise EstimationError(f"{skipped} of {U} scenarios failed")
    psi_s, beta_s = np.array(psi_rows), np.array(beta_rows)
    return SensitivityTable(net.node_ids, psi_s.mean(axis=0), beta_s.mean(axis=0), U, skipped, psi_s, beta_s)


def write_sensitivity_csv(table: SensitivityTable, path, samples_path=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("node", "psi", "beta"))
        for k, nid in enumerate(table.node_ids):
            w.writerow((nid, f"{table.psi[k]:.10g}", f"{table.beta[k]:.10g}"))
    if samples_path is not None:
        with open(samples_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("scenario", "node", "psi", "beta"))
            for s in range(table.psi_samples.shape[0]):
                for k, nid in enumerate(table.node_ids):
                    w.writerow((s, nid, f"{table.psi_samples[s, k]:.10g}", f"{table.beta_samples[s, k]:.10g}"))
