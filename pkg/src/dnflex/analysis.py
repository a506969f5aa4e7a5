"""Study metrics: optimality gap, loss-penalty sweeps, needs assessment and reactive impact."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DnflexError, MetricError, NoKneeError, SweepError, ValidationError
from .fas import FasConfig, FasSignal, FlexEnvelope, SaturationLevels, compute_fas, gate_envelopes, raw_bounds, \
    saturation_levels
from .network import STEP_HOURS, Network, Profiles
from .powerflow import NetworkState, loading_matrix, simulate_horizon, voltage_matrix
from .rdopf import DispatchResult, RdopfConfig, dispatch_horizon, extract_power_balance_duals, verify_ac_feasibility
from .sensitivity import LoadScenarioSampler, SensitivityTable, estimate_nvs

DEFAULT_LAMBDA_GRID = tuple(float(x) for x in np.geomspace(0.01, 2.0, 13))
DEFAULT_FLEX_LEVELS = (0.0, 25.0, 50.0, 75.0, 100.0)
DEFAULT_PF_SET = (0.98, 0.95, 0.9, 0.85, 0.8)
MAX_FLAGGED_FRACTION = 0.25
KNEE_MIN_DISTANCE = 1e-6
DUAL_TOL = 1e-6
COMPLIANCE_TOL = 1e-6  # pu on voltage, relative on loading; binding limits land within ~1e-9
MATRICES = ("R_up", "R_down", "C_load", "C_gen")


# --------------------------------------------------------------------------- scenario


@dataclass(frozen=True)
class Scenario:
    """Everything a study needs: feeder, profiles, the nominal twin and its FAS."""

    net: Network
    profiles: Profiles
    fas_cfg: FasConfig
    rdopf_cfg: RdopfConfig
    sens: SensitivityTable
    levels: SaturationLevels
    states: list[NetworkState]
    fas: FasSignal

    def envelope(self, level_pct: float, fas: FasSignal | None = None) -> FlexEnvelope:
        fas = self.fas if fas is None else fas
        return gate_envelopes(fas, raw_bounds(self.net, self.profiles, level_pct), self.profiles)

    def with_power_factor(self, pf: float) -> Scenario:
        """Same feeder and sensitivities, reactive load rebuilt at ``pf``; twin and FAS recomputed."""
        prof = self.profiles.with_power_factor(pf)
        states = simulate_horizon(self.net, prof)
        return replace(self, profiles=prof, states=states,
                       fas=compute_fas(self.net, states, self.levels, self.fas_cfg))


def build_scenario(net: Network, profiles: Profiles, fas_cfg: FasConfig | None = None,
                   rdopf_cfg: RdopfConfig | None = None, sens: SensitivityTable | None = None,
                   U: int = 100, seed: int = 0) -> Scenario:
    profiles.check_against(net)
    fas_cfg = fas_cfg or FasConfig()
    rdopf_cfg = rdopf_cfg or RdopfConfig.from_fas(fas_cfg)
    if sens is None:
        sens = estimate_nvs(net, LoadScenarioSampler(seed=seed), U=U)
    levels = saturation_levels(sens, fas_cfg)
    states = simulate_horizon(net, profiles)
    fas = compute_fas(net, states, levels, fas_cfg)
    return Scenario(net, profiles, fas_cfg, rdopf_cfg, sens, levels, states, fas)


@dataclass
class DispatchRun:
    """SOC and AC dispatch of one horizon at one flexibility level."""

    level_pct: float
    cfg: RdopfConfig
    fas: FasSignal
    envelope: FlexEnvelope
    soc: list[DispatchResult]
    ac: list[DispatchResult]

    @property
    def obj_soc(self) -> float:
        return float(sum(r.objective for r in self.soc))

    @property
    def obj_ac(self) -> float:
        return float(sum(r.objective for r in self.ac))

    @property
    def losses_kwh(self) -> float:
        return float(sum(r.losses_kw for r in self.ac) * STEP_HOURS)


def run_dispatch(scn: Scenario, level_pct: float, lambda_loss: float | None = None,
                 reactive: bool = True) -> DispatchRun:
    cfg = scn.rdopf_cfg if lambda_loss is None else replace(scn.rdopf_cfg, lambda_loss=float(lambda_loss))
    fas = scn.fas if reactive else scn.fas.without_reactive()
    env = scn.envelope(level_pct, fas)
    soc = dispatch_horizon(scn.net, scn.profiles, fas, env, cfg, "SOC")
    ac = dispatch_horizon(scn.net, scn.profiles, fas, env, cfg, "AC", soc_results=soc)
    return DispatchRun(float(level_pct), cfg, fas, env, soc, ac)


def verified_states(scn: Scenario, results: list[DispatchResult]) -> list[NetworkState]:
    """Independent power flow of every dispatched timestep."""
    loads = scn.profiles.p_load_kw + 1j * scn.profiles.q_load_kvar
    return [verify_ac_feasibility(scn.net, r, loads[:, r.t], scn.profiles.p_gen_kw[:, r.t], scn.rdopf_cfg).state
            for r in results]


# --------------------------------------------------------------------------- optimality gap and Pareto sweep


def optimality_gap(obj_ac: float, obj_soc: float) -> float:
    """Relative shortfall of the relaxed objective, in percent."""
    if not (math.isfinite(obj_ac) and math.isfinite(obj_soc)):
        raise MetricError("objectives must be finite")
    if obj_ac <= 0:
        raise MetricError("optimality gap is undefined for a non-positive AC objective")
    return (obj_ac - obj_soc) / obj_ac * 100.0


@dataclass(frozen=True)
class ParetoPoint:
    lambda_loss: float
    gap_pct: float
    cost_loss: float
    obj_ac: float
    obj_soc: float
    losses_kwh: float
    r_down_soc_kwh: float
    r_up_soc_kwh: float
    curtailed_kwh: float
    max_step_excess: float = 0.0  # largest per-step sigma_SOC - sigma_AC; <= 0 when the ordering holds
    recovered: int = 0
    flagged: bool = False
    reason: str = ""


@dataclass(frozen=True)
class ParetoCurve:
    flex_level: float
    points: tuple[ParetoPoint, ...]
    knee: float | None = None

    @property
    def valid(self) -> tuple[ParetoPoint, ...]:
        return tuple(p for p in self.points if not p.flagged)

    def trends(self, tol: float = 1e-6) -> dict[str, bool]:
        """Whether gap falls and Cost_loss rises along the grid, up to ``tol``."""
        pts = self.valid
        gap = np.array([p.gap_pct for p in pts])
        cost = np.array([p.cost_loss for p in pts])
        return {
            "gap_non_increasing": bool(np.all(np.diff(gap) <= tol)),
            "cost_loss_non_decreasing": bool(np.all(np.diff(cost) >= -tol)),
        }


def _pareto_point(scn: Scenario, lam: float, level: float) -> ParetoPoint:
    try:
        run = run_dispatch(scn, level, lam)
        gap = optimality_gap(run.obj_ac, run.obj_soc)
    except DnflexError as exc:
        nan = float("nan")
        return ParetoPoint(lam, nan, nan, nan, nan, nan, nan, nan, nan, nan, flagged=True, reason=str(exc))
    return ParetoPoint(
        lambda_loss=lam, gap_pct=gap, cost_loss=lam * run.losses_kwh, obj_ac=run.obj_ac, obj_soc=run.obj_soc,
        losses_kwh=run.losses_kwh,
        r_down_soc_kwh=float(sum(r.dp_plus.sum() for r in run.soc) * STEP_HOURS),
        r_up_soc_kwh=float(sum(-r.dp_minus.sum() for r in run.soc) * STEP_HOURS),
        curtailed_kwh=float(sum(r.load_curt.sum() + r.gen_curt.sum() for r in run.ac) * STEP_HOURS),
        max_step_excess=max(s.objective - a.objective for s, a in zip(run.soc, run.ac)),
        recovered=sum(r.recovered for r in run.ac),
    )


def sweep_loss_penalty(scn: Scenario, lambda_grid=DEFAULT_LAMBDA_GRID, flex_level: float = 25.0,
                       workers: int = 1) -> ParetoCurve:
    grid = [float(x) for x in lambda_grid]
    if len(grid) < 4:
        raise ValidationError("a sweep needs at least 4 grid points")
    if any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 0:
        raise ValidationError("lambda grid must be non-negative and strictly increasing")
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            points = list(pool.map(_pareto_point, [scn] * len(grid), grid, [flex_level] * len(grid)))
    else:
        points = [_pareto_point(scn, lam, flex_level) for lam in grid]
    flagged = sum(p.flagged for p in points)
    if flagged > MAX_FLAGGED_FRACTION * len(points):
        raise SweepError(f"{flagged} of {len(points)} sweep points failed")
    curve = ParetoCurve(float(flex_level), tuple(points))
    try:
        return replace(curve, knee=knee_point(curve))
    except (NoKneeError, MetricError):
        return curve


def knee_index(x, y) -> int:
    """Index of the point farthest from the endpoint chord on min-max normalized axes."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.size < 4 or x.shape != y.shape:
        raise MetricError("knee detection needs at least 4 matching points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise MetricError("knee detection needs finite points")
    span_x, span_y = np.ptp(x), np.ptp(y)
    if span_x == 0 or span_y == 0:
        raise NoKneeError("curve is flat along one axis")
    xn, yn = (x - x.min()) / span_x, (y - y.min()) / span_y
    chord = np.array([xn[-1] - xn[0], yn[-1] - yn[0]])
    length = float(np.hypot(*chord))
    if length == 0:
        raise NoKneeError("curve endpoints coincide")
    dist = np.abs(chord[0] * (yn - yn[0]) - chord[1] * (xn - xn[0])) / length
    k = int(np.argmax(dist))
    if dist[k] < KNEE_MIN_DISTANCE:
        raise NoKneeError("curve is affine within tolerance")
    return k


def knee_point(curve: ParetoCurve) -> float:
    pts = sorted(curve.valid, key=lambda p: p.lambda_loss)
    k = knee_index([p.cost_loss for p in pts], [p.gap_pct for p in pts])
    return pts[k].lambda_loss


# --------------------------------------------------------------------------- needs assessment


@dataclass(frozen=True)
class Compliance:
    """Percent of samples in each condition; voltages over all node-steps, loadings over branch-steps."""

    over_v_max: float
    under_v_min: float
    beyond_bands: float
    loading_ge_100: float
    loading_gt_75: float


def compliance(v_mag: np.ndarray, loading_pct: np.ndarray, cfg: FasConfig, tol: float = COMPLIANCE_TOL
               ) -> Compliance:
    v = np.asarray(v_mag, float)
    load = np.abs(np.asarray(loading_pct, float))

    def pct(mask):
        return float(100.0 * mask.mean()) if mask.size else 0.0

    return Compliance(
        over_v_max=pct(v > cfg.v_max + tol),
        under_v_min=pct(v < cfg.v_min - tol),
        beyond_bands=pct((v > 1 + cfg.dv_perm + tol) | (v < 1 - cfg.dv_perm - tol)),
        loading_ge_100=pct(load >= 100.0 * (1 + tol)),
        loading_gt_75=pct(load > cfg.dt_perm * (1 + tol)),
    )


@dataclass(frozen=True)
class AssessmentReport:
    matrices: dict[str, np.ndarray]  # name -> (N, T) kWh
    temporal: dict[str, np.ndarray]  # name -> (T,)
    locational: dict[str, np.ndarray]  # name -> (N,)
    cumulative_kwh: dict[str, float]
    peak_kw: dict[str, float]
    compliance: Compliance
    losses_kwh: float
    objective: float
    nominal_compliance: Compliance | None = None
    nominal_losses_kwh: float | None = None

    def summary(self) -> dict:
        out = {
            "cumulative_kwh": self.cumulative_kwh,
            "peak_kw": self.peak_kw,
            "compliance_pct": asdict(self.compliance),
            "losses_kwh": self.losses_kwh,
            "objective": self.objective,
        }
        if self.nominal_compliance is not None:
            out["nominal_compliance_pct"] = asdict(self.nominal_compliance)
            out["nominal_losses_kwh"] = self.nominal_losses_kwh
        return out


def marginals(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(temporal, locational): sums over nodes per step and over steps per node."""
    m = np.asarray(matrix, float)
    return m.sum(axis=0), m.sum(axis=1)


def needs_assessment(net: Network, results: list[DispatchResult], states: list[NetworkState],
                     cfg: FasConfig | None = None, nominal_states: list[NetworkState] | None = None
                     ) -> AssessmentReport:
    """Energy matrices and compliance from a dispatched horizon and its post-dispatch states."""
    cfg = cfg or FasConfig()
    if not results:
        raise ValidationError("needs assessment requires a dispatch for every timestep")
    if len(states) != len(results):
        raise ValidationError(f"{len(results)} dispatch results but {len(states)} states")
    if nominal_states is not None and len(nominal_states) != len(results):
        raise ValidationError("nominal states must cover the same horizon")
    n = net.n_nodes
    if any(r.dp_plus.shape != (n,) for r in results) or any(s.v_mag.shape != (n,) for s in states):
        raise ValidationError(f"per-node vectors must have length {n}")
    if [r.t for r in results] != sorted(r.t for r in results):
        raise ValidationError("dispatch results must be in time order")

    def stack(attr, sign=1.0):
        return sign * np.stack([getattr(r, attr) for r in results], axis=1) * STEP_HOURS

    mats = {
        "R_up": np.abs(stack("dp_minus")),
        "R_down": np.abs(stack("dp_plus")),
        "C_load": np.abs(stack("load_curt")),
        "C_gen": np.abs(stack("gen_curt")),
    }
    temporal, locational = {}, {}
    for name, m in mats.items():
        temporal[name], locational[name] = marginals(m)
    nominal = None
    nominal_losses = None
    if nominal_states is not None:
        nominal = compliance(voltage_matrix(nominal_states), loading_matrix(nominal_states), cfg)
        nominal_losses = float(sum(s.total_loss_kw for s in nominal_states) * STEP_HOURS)
    return AssessmentReport(
        matrices=mats, temporal=temporal, locational=locational,
        cumulative_kwh={k: float(m.sum()) for k, m in mats.items()},
        peak_kw={k: float(m.max() / STEP_HOURS) if m.size else 0.0 for k, m in mats.items()},
        compliance=compliance(voltage_matrix(states), loading_matrix(states), cfg),
        losses_kwh=float(sum(s.total_loss_kw for s in states) * STEP_HOURS),
        objective=float(sum(r.objective for r in results)),
        nominal_compliance=nominal, nominal_losses_kwh=nominal_losses,
    )


# --------------------------------------------------------------------------- FAS vs duals


@dataclass(frozen=True)
class FasDualComparison:
    fas_active: np.ndarray  # (T,) any node with nonzero FAS
    dual_active: np.ndarray  # (T,) any node with |dual| > tol
    max_abs_fas: np.ndarray
    max_abs_dual: np.ndarray

    @property
    def duals_within_fas(self) -> bool:
        return bool(np.all(self.fas_active | ~self.dual_active))

    @property
    def early_steps(self) -> np.ndarray:
        """Steps where the FAS already acts but the duals are still zero."""
        return np.flatnonzero(self.fas_active & ~self.dual_active)


def compare_fas_duals(fas: FasSignal, soc_results: list[DispatchResult], tol: float = DUAL_TOL) -> FasDualComparison:
    duals = extract_power_balance_duals(soc_results)
    chans = np.stack([np.abs(fas.lam_p_plus), np.abs(fas.lam_p_minus),
                      np.abs(fas.lam_q_plus), np.abs(fas.lam_q_minus)])
    if duals.shape != chans.shape[1:]:
        raise ValidationError("duals and FAS must cover the same nodes and horizon")
    max_fas = chans.max(axis=(0, 1))
    max_dual = np.abs(duals).max(axis=0)
    return FasDualComparison(fas.active().any(axis=0), max_dual > tol, max_fas, max_dual)


# --------------------------------------------------------------------------- reactive impact


@dataclass(frozen=True)
class ReactiveCell:
    pf: float
    flex_level: float
    x_noq_kwh: float
    y_q_kwh: float
    obj_noq: float
    obj_withq: float
    p_reduction_pct: float  # nan when undefined
    profit_reactive_pct: float
    profit_net_pct: float  # avoided P procurement minus Q cost, over the P cost without Q
    undefined: bool = False


@dataclass(frozen=True)
class ReactiveImpact:
    cells: tuple[ReactiveCell, ...]

    def table(self, attr: str) -> dict[float, dict[float, float]]:
        """{flex_level: {pf: value}}."""
        out: dict[float, dict[float, float]] = {}
        for c in self.cells:
            out.setdefault(c.flex_level, {})[c.pf] = getattr(c, attr)
        return out


def absolute_p_energy(results: list[DispatchResult]) -> float:
    """kWh of |load curt| + |gen curt| + |ramp down| + |ramp up|, summed without cancellation."""
    return float(sum(np.abs(r.load_curt).sum() + np.abs(r.gen_curt).sum() + np.abs(r.dp_plus).sum()
                     + np.abs(r.dp_minus).sum() for r in results) * STEP_HOURS)


def split_costs(run: DispatchRun) -> tuple[float, float]:
    """(active, reactive) activation cost of the AC dispatch at the FAS and curtailment prices."""
    cp = cq = 0.0
    for r in run.ac:
        f = run.fas.at(r.t)
        cp += (f.lam_p_plus @ r.dp_plus + f.lam_p_minus @ r.dp_minus
               + run.cfg.lambda_curt_load * r.load_curt.sum() + run.cfg.lambda_curt_gen * r.gen_curt.sum())
        cq += f.lam_q_plus @ r.dq_plus + f.lam_q_minus @ r.dq_minus
    return float(cp * STEP_HOURS), float(cq * STEP_HOURS)


def _reactive_cell(scn: Scenario, pf: float, level: float) -> ReactiveCell:
    without = run_dispatch(scn, level, reactive=False)
    with_q = run_dispatch(scn, level, reactive=True)
    x, y = absolute_p_energy(without.ac), absolute_p_energy(with_q.ac)
    o_n, o_w = without.obj_ac, with_q.obj_ac
    p_n, _ = split_costs(without)
    p_w, q_w = split_costs(with_q)
    nan = float("nan")
    return ReactiveCell(
        pf=pf, flex_level=level, x_noq_kwh=x, y_q_kwh=y, obj_noq=o_n, obj_withq=o_w,
        p_reduction_pct=100.0 * (x - y) / x if x > 0 else nan,
        profit_reactive_pct=100.0 * (o_n - o_w) / o_n if o_n > 0 else nan,
        profit_net_pct=100.0 * (p_n - p_w - q_w) / p_n if p_n > 0 else nan,
        undefined=not (x > 0 and o_n > 0),
    )


def _reactive_pf(scn: Scenario, pf: float, levels) -> list[ReactiveCell]:
    scn_pf = scn.with_power_factor(pf)
    return [_reactive_cell(scn_pf, pf, float(level)) for level in levels]


def reactive_impact(scn: Scenario, pf_set=DEFAULT_PF_SET, flex_levels=DEFAULT_FLEX_LEVELS,
                    workers: int = 1) -> ReactiveImpact:
    pfs = [float(p) for p in pf_set]
    if any(not 0 < p <= 1 for p in pfs):
        raise ValidationError("power factors must lie in (0, 1]")
    levels = [float(x) for x in flex_levels]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_reactive_pf, [scn] * len(pfs), pfs, [levels] * len(pfs)))
    else:
        rows = [_reactive_pf(scn, pf, levels) for pf in pfs]
    return ReactiveImpact(tuple(c for row in rows for c in row))


# --------------------------------------------------------------------------- report bundle


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else f"{x:.10g}"
    return str(x)


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _json(path, doc) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def write_assessment(out_dir, net: Network, reports: dict[float, AssessmentReport], heatmaps: bool = True
                     ) -> list[Path]:
    """``assessment.json`` keyed by flexibility level, optionally one heatmap CSV per matrix and level."""
    out_dir = Path(out_dir)
    written = [out_dir / "assessment.json"]
    _json(written[0], {f"{lvl:g}": rep.summary() for lvl, rep in sorted(reports.items())})
    if not heatmaps:
        return written
    for lvl, rep in sorted(reports.items()):
        suffix = "" if len(reports) == 1 else f"_flex{lvl:g}"
        for name in MATRICES:
            m = rep.matrices[name]
            path = out_dir / f"heatmap_{name}{suffix}.csv"
            _write_rows(path, ("node", *(f"t{t}" for t in range(m.shape[1]))),
                        ((nid, *m[k]) for k, nid in enumerate(net.node_ids)))
            written.append(path)
    return written


PARETO_HEADER = ("lambda_loss", "gap_pct", "cost_loss", "obj_ac", "obj_soc", "losses_kwh", "r_down_soc_kwh",
                 "r_up_soc_kwh", "curtailed_kwh", "max_step_excess", "recovered", "flagged", "knee")


def write_pareto(path, curves: list[ParetoCurve]) -> None:
    rows = ((c.flex_level, p.lambda_loss, p.gap_pct, p.cost_loss, p.obj_ac, p.obj_soc, p.losses_kwh,
             p.r_down_soc_kwh, p.r_up_soc_kwh, p.curtailed_kwh, p.max_step_excess, p.recovered, p.flagged,
             c.knee is not None and p.lambda_loss == c.knee)
            for c in curves for p in c.points)
    _write_rows(path, ("flex_level", *PARETO_HEADER), rows)


REACTIVE_HEADER = ("pf", "flex_level", "x_noq_kwh", "y_q_kwh", "obj_noq", "obj_withq", "p_reduction_pct",
                   "profit_reactive_pct", "profit_net_pct", "undefined")


def write_reactive(path, impact: ReactiveImpact) -> None:
    _write_rows(path, REACTIVE_HEADER, (tuple(getattr(c, k) for k in (
        "pf", "flex_level", "x_noq_kwh", "y_q_kwh", "obj_noq", "obj_withq", "p_reduction_pct",
        "profit_reactive_pct", "profit_net_pct", "undefined")) for c in impact.cells))


def write_fas_vs_duals(path, cmp: FasDualComparison) -> None:
    _write_rows(path, ("t", "fas_active", "dual_active", "max_abs_fas", "max_abs_dual"),
                ((t, bool(cmp.fas_active[t]), bool(cmp.dual_active[t]), cmp.max_abs_fas[t], cmp.max_abs_dual[t])
                 for t in range(cmp.fas_active.size)))
