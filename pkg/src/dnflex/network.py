"""Radial feeder data model, JSON/CSV I/O and the built-in 19-node test feeder."""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ParseError, TopologyError, ValidationError

NODE_KINDS = ("substation", "junction", "prosumer")
STEP_HOURS = 0.25


@dataclass(frozen=True)
class Node:
    id: int
    kind: str
    pv_kwp: float = 0.0
    hp_kw: float = 0.0
    peak_load_kw: float = 0.0
    has_flexibility: bool = False


@dataclass(frozen=True)
class Branch:
    """Series branch; ``r``, ``x`` and ``s_max`` are per unit."""

    from_node: int
    to_node: int
    r: float
    x: float
    s_max: float
    theta_min: float = -math.pi / 6
    theta_max: float = math.pi / 6

    @property
    def admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Network:
    nodes: tuple[Node, ...]
    branches: tuple[Branch, ...]
    slack: int
    v_base_v: float = 400.0
    s_base_kva: float = 100.0
    radial: bool = True

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "branches", tuple(self.branches))
        _validate(self)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @cached_property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(n.id for n in self.nodes)

    @cached_property
    def index(self) -> dict[int, int]:
        return {nid: k for k, nid in enumerate(self.node_ids)}

    @property
    def slack_index(self) -> int:
        return self.index[self.slack]

    @cached_property
    def f_idx(self) -> np.ndarray:
        return _frozen(np.array([self.index[b.from_node] for b in self.branches], dtype=int))

    @cached_property
    def t_idx(self) -> np.ndarray:
        return _frozen(np.array([self.index[b.to_node] for b in self.branches], dtype=int))

    @cached_property
    def g(self) -> np.ndarray:
        return _frozen(np.array([b.admittance.real for b in self.branches]))

    @cached_property
    def b(self) -> np.ndarray:
        return _frozen(np.array([b.admittance.imag for b in self.branches]))

    @cached_property
    def s_max(self) -> np.ndarray:
        return _frozen(np.array([b.s_max for b in self.branches]))

    @cached_property
    def ybus(self) -> np.ndarray:
        n = self.n_nodes
        y = np.zeros((n, n), dtype=complex)
        for k, br in enumerate(self.branches):
            i, j = self.f_idx[k], self.t_idx[k]
            ys = br.admittance
            y[i, i] += ys
            y[j, j] += ys
            y[i, j] -= ys
            y[j, i] -= ys
        return _frozen(y)

    @cached_property
    def downstream(self) -> np.ndarray:
        """+1 where the branch ``from`` end is nearer the substation, else -1."""
        depth = self.depth
        return _frozen(np.where(depth[self.f_idx] < depth[self.t_idx], 1, -1))

    @cached_property
    def depth(self) -> np.ndarray:
        """Hop distance of every node from the slack."""
        adj = self.adjacency
        depth = np.full(self.n_nodes, -1, dtype=int)
        depth[self.slack_index] = 0
        queue = deque([self.slack_index])
        while queue:
            u = queue.popleft()
            for v, _ in adj[u]:
                if depth[v] < 0:
                    depth[v] = depth[u] + 1
                    queue.append(v)
        return _frozen(depth)

    @cached_property
    def adjacency(self) -> list[list[tuple[int, int]]]:
        adj: list[list[tuple[int, int]]] = [[] for _ in self.nodes]
        for k in range(self.n_branches):
            i, j = int(self.f_idx[k]), int(self.t_idx[k])
            adj[i].append((j, k))
            adj[j].append((i, k))
        return adj

    @cached_property
    def flexible_mask(self) -> np.ndarray:
        return _frozen(np.array([n.has_flexibility for n in self.nodes]))

    @cached_property
    def prosumer_mask(self) -> np.ndarray:
        return _frozen(np.array([n.kind == "prosumer" for n in self.nodes]))

    def to_dict(self) -> dict:
        return {
            "bases": {"v_base_v": self.v_base_v, "s_base_kva": self.s_base_kva},
            "slack": self.slack,
            "radial": self.radial,
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind,
                    "pv_kwp": n.pv_kwp,
                    "hp_kw": n.hp_kw,
                    "peak_load_kw": n.peak_load_kw,
                    "has_flexibility": n.has_flexibility,
                }
                for n in self.nodes
            ],
            "branches": [
                {
                    "from": b.from_node,
                    "to": b.to_node,
                    "r_pu": b.r,
                    "x_pu": b.x,
                    "s_max_pu": b.s_max,
                    "theta_min_rad": b.theta_min,
                    "theta_max_rad": b.theta_max,
                }
                for b in self.branches
            ],
        }


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _validate(net: Network) -> None:
    ids = [n.id for n in net.nodes]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate node ids")
    for n in net.nodes:
        if n.kind not in NODE_KINDS:
            raise ValidationError(f"node {n.id}: unknown kind {n.kind!r}")
        if min(n.pv_kwp, n.hp_kw, n.peak_load_kw) < 0:
            raise ValidationError(f"node {n.id}: negative rating")
        if (n.kind == "prosumer") != (n.peak_load_kw > 0):
            raise ValidationError(f"node {n.id}: prosumer kind must coincide with peak_load_kw > 0")
        if n.kind != "prosumer" and (n.pv_kwp > 0 or n.hp_kw > 0 or n.has_flexibility):
            raise ValidationError(f"node {n.id}: only prosumers carry load, PV or flexibility")
    subs = [n.id for n in net.nodes if n.kind == "substation"]
    if subs != [net.slack]:
        raise ValidationError("exactly one substation node, equal to the slack, is required")
    known = set(ids)
    for k, b in enumerate(net.branches):
        if b.from_node not in known or b.to_node not in known:
            raise TopologyError(f"branch {k} ({b.from_node}->{b.to_node}) references an unknown node")
        if b.from_node == b.to_node:
            raise TopologyError(f"branch {k} is a self loop")
        if not (b.r > 0 and b.x > 0 and b.s_max > 0):
            raise ValidationError(f"branch {k}: r, x and s_max must be strictly positive")
        if not (b.theta_min < 0 < b.theta_max):
            raise ValidationError(f"branch {k}: need theta_min < 0 < theta_max")
        if max(abs(b.theta_min), abs(b.theta_max)) >= math.pi / 2:
            raise ValidationError(f"branch {k}: angle limits must lie inside (-pi/2, pi/2)")
    if net.v_base_v <= 0 or net.s_base_kva <= 0:
        raise ValidationError("bases must be positive")

    # connectivity (union-find) and cycle detection
    parent = {i: i for i in ids}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    cyclic = False
    for b in net.branches:
        ra, rb = find(b.from_node), find(b.to_node)
        if ra == rb:
            cyclic = True
        else:
            parent[ra] = rb
    if len({find(i) for i in ids}) != 1:
        raise TopologyError("network graph is disconnected")
    if net.radial and (cyclic or len(net.branches) != len(ids) - 1):
        raise TopologyError("radial network must be a tree (|branches| = |nodes| - 1, no cycles)")


# --------------------------------------------------------------------------- parsing

_NODE_FIELDS = ("id", "kind", "pv_kwp", "hp_kw", "peak_load_kw", "has_flexibility")
_BRANCH_FIELDS = ("from", "to", "r_pu", "x_pu", "s_max_pu", "theta_min_rad", "theta_max_rad")


def _require(obj, key, where, kind=(int, float)):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError("missing required field", f"{where}.{key}")
    val = obj[key]
    if isinstance(kind, type):
        kind = (kind,)
    if kind is not None and (not isinstance(val, kind) or isinstance(val, bool) and bool not in kind):
        raise ParseError(f"expected {kind}, got {type(val).__name__}", f"{where}.{key}")
    return val


def network_from_dict(doc: dict) -> Network:
    if not isinstance(doc, dict):
        raise ParseError("document root must be an object")
    bases = _require(doc, "bases", "$", dict)
    v_base = float(_require(bases, "v_base_v", "bases"))
    s_base = float(_require(bases, "s_base_kva", "bases"))
    slack = _require(doc, "slack", "$", int)
    radial = doc.get("radial", True)
    if not isinstance(radial, bool):
        raise ParseError("expected bool", "radial")
    raw_nodes = _require(doc, "nodes", "$", list)
    raw_branches = _require(doc, "branches", "$", list)
    nodes = []
    for k, rn in enumerate(raw_nodes):
        where = f"nodes[{k}]"
        nodes.append(
            Node(
                id=_require(rn, "id", where, int),
                kind=_require(rn, "kind", where, str),
                pv_kwp=float(_require(rn, "pv_kwp", where)),
                hp_kw=float(_require(rn, "hp_kw", where)),
                peak_load_kw=float(_require(rn, "peak_load_kw", where)),
                has_flexibility=_require(rn, "has_flexibility", where, bool),
            )
        )
    branches = []
    for k, rb in enumerate(raw_branches):
        where = f"branches[{k}]"
        branches.append(
            Branch(
                from_node=_require(rb, "from", where, int),
                to_node=_require(rb, "to", where, int),
                r=float(_require(rb, "r_pu", where)),
                x=float(_require(rb, "x_pu", where)),
                s_max=float(_require(rb, "s_max_pu", where)),
                theta_min=float(rb.get("theta_min_rad", -math.pi / 6)),
                theta_max=float(rb.get("theta_max_rad", math.pi / 6)),
            )
        )
    return Network(nodes, branches, slack, v_base, s_base, radial)


def parse_network(path) -> Network:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from exc
    return network_from_dict(doc)


def write_network(net: Network, path) -> None:
    Path(path).write_text(json.dumps(net.to_dict(), indent=2) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------- profiles


@dataclass(frozen=True)
class Profiles:
    """Per-node 15-minute series, rows ordered like ``Network.nodes``."""

    node_ids: tuple[int, ...]
    p_load_kw: np.ndarray
    q_load_kvar: np.ndarray
    p_gen_kw: np.ndarray
    seed: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        arrays = []
        for name in ("p_load_kw", "q_load_kvar", "p_gen_kw"):
            a = np.array(getattr(self, name), dtype=float, copy=True)
            if a.ndim != 2 or a.shape[0] != len(self.node_ids):
                raise ValidationError(f"{name} must be (n_nodes, T)")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
            arrays.append(a)
        if len({a.shape for a in arrays}) != 1:
            raise ValidationError("all profile series must share one horizon")
        if (self.p_load_kw < 0).any() or (self.p_gen_kw < 0).any():
            raise ValidationError("active load and generation must be non-negative")
        object.__setattr__(self, "node_ids", tuple(self.node_ids))

    @property
    def horizon(self) -> int:
        return self.p_load_kw.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Profiles):
            return NotImplemented
        return (
            self.node_ids == other.node_ids
            and self.seed == other.seed
            and np.array_equal(self.p_load_kw, other.p_load_kw)
            and np.array_equal(self.q_load_kvar, other.q_load_kvar)
            and np.array_equal(self.p_gen_kw, other.p_gen_kw)
        )

    __hash__ = None

    def window(self, start: int, stop: int) -> Profiles:
        return Profiles(
            self.node_ids,
            self.p_load_kw[:, start:stop],
            self.q_load_kvar[:, start:stop],
            self.p_gen_kw[:, start:stop],
            self.seed,
            dict(self.meta),
        )

    def with_power_factor(self, pf: float) -> Profiles:
        """Rebuild reactive load from active load at a lagging power factor."""
        return Profiles(
            self.node_ids,
            self.p_load_kw,
            reactive_from_pf(self.p_load_kw, pf),
            self.p_gen_kw,
            self.seed,
            {**self.meta, "power_factor": pf},
        )

    def injections_pu(self, net: Network, t: int) -> np.ndarray:
        """Net complex nodal injection (generation minus load) at step ``t``."""
        p = (self.p_gen_kw[:, t] - self.p_load_kw[:, t]) / net.s_base_kva
        q = -self.q_load_kvar[:, t] / net.s_base_kva
        return p + 1j * q

    def check_against(self, net: Network) -> None:
        if self.node_ids != net.node_ids:
            raise ValidationError("profile node order does not match the network")


def reactive_from_pf(p: np.ndarray, pf: float) -> np.ndarray:
    if not 0 < pf <= 1:
        raise ValidationError("power factor must lie in (0, 1]")
    return np.asarray(p, dtype=float) * math.tan(math.acos(pf))


PROFILE_HEADER = ("node_id", "t_index", "p_load_kw", "q_load_kvar", "p_gen_kw")


def write_profiles(prof: Profiles, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_HEADER)
        for k, nid in enumerate(prof.node_ids):
            for t in range(prof.horizon):
                w.writerow(
                    (nid, t, repr(float(prof.p_load_kw[k, t])), repr(float(prof.q_load_kvar[k, t])),
                     repr(float(prof.p_gen_kw[k, t])))
                )


def parse_profiles(path, net: Network) -> Profiles:
    rows: dict[tuple[int, int], tuple[float, float, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PROFILE_HEADER:
            raise ParseError(f"header must be {','.join(PROFILE_HEADER)}", "profiles")
        for line, row in enumerate(reader, start=2):
            try:
                key = (int(row["node_id"]), int(row["t_index"]))
                rows[key] = (float(row["p_load_kw"]), float(row["q_load_kvar"]), float(row["p_gen_kw"]))
            except (TypeError, ValueError) as exc:
                raise ParseError(f"line {line}: {exc}", "profiles") from exc
    if not rows:
        raise ParseError("no rows", "profiles")
    horizon = max(t for _, t in rows) + 1
    arr = np.zeros((3, net.n_nodes, horizon))
    for (nid, t), vals in rows.items():
        if nid not in net.index:
            raise ParseError(f"unknown node {nid}", "profiles.node_id")
        arr[:, net.index[nid], t] = vals
    if len(rows) != net.n_nodes * horizon:
        raise ParseError("every node needs a row for every t_index", "profiles")
    return Profiles(net.node_ids, arr[0], arr[1], arr[2])


# --------------------------------------------------------------------------- built-in feeder

# prosumer id -> (PV kWp, HP kW, SME, peak load kW)
TABLE1 = {
    1: (0.0, 0.0, False, 20.0),
    3: (10.0, 0.0, True, 7.0),
    4: (20.0, 0.0, False, 4.0),
    6: (8.0, 0.0, False, 2.0),
    7: (20.0, 0.0, True, 9.0),
    9: (12.0, 0.0, False, 12.0),
    10: (15.0, 6.0, True, 14.0),
    12: (12.0, 0.0, False, 14.0),
    13: (10.0, 0.0, False, 14.0),
    15: (18.0, 0.0, False, 16.0),
    16: (18.0, 0.0, False, 20.0),
    18: (18.0, 7.5, False, 10.0),
}
MAIN_BRANCH = (0, 2, 5, 8, 11, 14, 17)
# prosumer -> main-branch attachment point
ATTACHMENT = {1: 0, 3: 2, 4: 2, 6: 5, 7: 5, 9: 8, 10: 8, 12: 11, 13: 11, 15: 14, 16: 14, 18: 17}

MAIN_R_OHM_PER_KM = 0.206  # 150 mm2 Al
SPUR_R_OHM_PER_KM = 0.868  # 35 mm2 Al
MAIN_LENGTH_KM = 0.300
SPUR_LENGTH_KM = 0.150
R_OVER_X = 2.01
MAIN_RATING_A = 250.0
SPUR_RATING_A = 24.0  # service-connection limit, see README


def builtin_network(
    v_base_v: float = 400.0,
    s_base_kva: float = 100.0,
    main_rating_a: float = MAIN_RATING_A,
    spur_rating_a: float = SPUR_RATING_A,
) -> Network:
    z_base = v_base_v**2 / (s_base_kva * 1e3)

    def seg(length_km, r_per_km, rating_a):
        r = r_per_km * length_km / z_base
        s = math.sqrt(3) * v_base_v * rating_a / 1e3 / s_base_kva
        return r, r / R_OVER_X, s

    nodes = [Node(0, "substation")]
    for nid in range(1, 19):
        if nid in TABLE1:
            pv, hp, _, peak = TABLE1[nid]
            nodes.append(Node(nid, "prosumer", pv, hp, peak, True))
        else:
            nodes.append(Node(nid, "junction"))
    branches = []
    rm, xm, sm = seg(MAIN_LENGTH_KM, MAIN_R_OHM_PER_KM, main_rating_a)
    for a, b in zip(MAIN_BRANCH[:-1], MAIN_BRANCH[1:]):
        branches.append(Branch(a, b, rm, xm, sm))
    rs, xs, ss = seg(SPUR_LENGTH_KM, SPUR_R_OHM_PER_KM, spur_rating_a)
    for nid, parent in ATTACHMENT.items():
        branches.append(Branch(parent, nid, rs, xs, ss))
    return Network(nodes, branches, 0, v_base_v, s_base_kva)


# generator tuning; see README "Synthetic profiles"
SYNTH_DEFAULTS = {
    "power_factor": 0.98,
    "pv_peak_fraction": 0.65,
    "sunrise_h": 6.5,
    "sunset_h": 20.0,
    "noise": 0.04,
    "morning_h": (6.5, 8.5),
    "evening_h": (17.0, 22.0),
    "peak_width_h": 0.6,
    "morning_amp": 0.4,
}


def synth_profiles(
    net: Network,
    seed: int = 1,
    scale: float = 1.0,
    horizon: int = 96,
    power_factor: float | None = None,
    pv_peak_fraction: float | None = None,
) -> Profiles:
    """Seeded residential/SME day: two-peak load shapes and a clear-sky PV bell.

    ``scale`` multiplies load only; PV always follows the kWp rating.
    """
    if scale < 0:
        raise ValidationError("scale must be non-negative")
    pf = SYNTH_DEFAULTS["power_factor"] if power_factor is None else power_factor
    pv_frac = SYNTH_DEFAULTS["pv_peak_fraction"] if pv_peak_fraction is None else pv_peak_fraction
    rng = np.random.default_rng(seed)
    hours = (np.arange(horizon) + 0.5) * 24.0 / horizon

    def bump(centre, width):
        d = (hours - centre + 12.0) % 24.0 - 12.0
        return np.exp(-0.5 * (d / width) ** 2)

    rise, sset = SYNTH_DEFAULTS["sunrise_h"], SYNTH_DEFAULTS["sunset_h"]
    phase = np.clip((hours - rise) / (sset - rise), 0.0, 1.0)
    pv_shape = np.sin(np.pi * phase) ** 2

    n, T = net.n_nodes, horizon
    p = np.zeros((n, T))
    g = np.zeros((n, T))
    for k, node in enumerate(net.nodes):
        # draw for every node so the stream does not depend on which nodes are prosumers
        centres = rng.uniform(*SYNTH_DEFAULTS["morning_h"]), rng.uniform(*SYNTH_DEFAULTS["evening_h"])
        amps = rng.uniform(0.8, 1.0, size=2)
        base = rng.uniform(0.12, 0.2)
        noise = 1.0 + SYNTH_DEFAULTS["noise"] * rng.standard_normal(T)
        if node.kind != "prosumer":
            continue
        sme = TABLE1[node.id][2] if node.id in TABLE1 else False
        if sme:
            shape = base + amps[0] * bump(centres[0] + 3.0, 2.5) + 0.7 * amps[1] * bump(centres[1] - 4.0, 2.0)
        else:
            w = SYNTH_DEFAULTS["peak_width_h"]
            shape = base + SYNTH_DEFAULTS["morning_amp"] * amps[0] * bump(centres[0], 0.8 * w) + amps[1] * bump(centres[1], w)
        if node.hp_kw > 0:
            hp = bump(5.5, 2.0) + 0.6 * bump(21.5, 1.5)
            shape = shape + (node.hp_kw / node.peak_load_kw) * hp
        shape = np.clip(shape * noise, 0.0, None)
        shape /= shape.max()
        p[k] = node.peak_load_kw * shape
        g[k] = node.pv_kwp * pv_frac * pv_shape
    p *= scale
    q = reactive_from_pf(p, pf)
    return Profiles(
        net.node_ids, p, q, g, seed,
        {"scale": scale, "power_factor": pf, "pv_peak_fraction": pv_frac, "synthetic": True},
    )


def builtin_test_feeder() -> tuple[Network, Profiles]:
    net = builtin_network()
    return net, synth_profiles(net, seed=1, scale=1.0)
