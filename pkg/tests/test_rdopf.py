import numpy as np
import pytest

from dnflex.errors import InfeasibleError, SolverError, ValidationError
from dnflex.network import STEP_HOURS
from dnflex.powerflow import solve_power_flow
from dnflex.rdopf import (RdopfConfig, extract_power_balance_duals, solve_ac_rdopf, solve_soc_rdopf,
                          verify_ac_feasibility, write_dispatch)
from oracles import binary_enumeration, brute_force_dispatch, chain_network, cvx_soc_relaxation, envelope, signal

# curtailment at 0.39 keeps every FAS price (<= 0.3) cheaper, as the droop design requires,
# and bounds the 0.01 kW grid error by 0.39 * 0.01 * 0.25 < 1e-3
PRICES = dict(lambda_curt_load=0.39, lambda_curt_gen=0.39)

# name: (network kwargs, loads kW, Q/P, gens kW, FAS, envelope bounds, lambda_loss)
CASES = {
    "uv_flex": (dict(r=(0.1, 0.1)), [0, 10, 30], 0.2, [0, 0, 0], dict(lam_p_plus=[0, 0, 0.3]),
                dict(p_flex_max=[0, 0, 3], load_cap=[0, 0, 3]), 0.0),
    "uv_curt": (dict(r=(0.1, 0.1)), [0, 10, 30], 0.2, [0, 0, 0], dict(lam_p_plus=[0, 0, 0.3]),
                dict(p_flex_max=[0, 0, 1], load_cap=[0, 0, 3]), 0.0),
    "uv_two_nodes": (dict(r=(0.1, 0.1)), [0, 10, 30], 0.2, [0, 0, 0], dict(lam_p_plus=[0, 0.1, 0.3]),
                     dict(p_flex_max=[0, 3, 3], load_cap=[0, 0, 0]), 0.0),
    "uv_q": (dict(r=(0.1, 0.1)), [0, 10, 28], 0.4, [0, 0, 0], dict(lam_p_plus=[0, 0, 0.3], lam_q_plus=[0, 0, 0.1]),
             dict(p_flex_max=[0, 0, 3], q_flex_max=[0, 0, 3], load_cap=[0, 0, 0]), 0.0),
    "uv_loss": (dict(r=(0.1, 0.1)), [0, 10, 30], 0.2, [0, 0, 0], dict(lam_p_plus=[0, 0, 0.3]),
                dict(p_flex_max=[0, 0, 3], load_cap=[0, 0, 0]), 0.5),
    "ov_loss": (dict(r=(0.1, 0.1)), [0, 2, 2], 0.2, [0, 0, 50], dict(lam_p_minus=[0, 0, -0.3]),
                dict(p_flex_min=[0, 0, -3], gen_cap=[0, 0, 3], load_cap=[0, 0, 0]), 1.0),
    "ov_curt_loss": (dict(r=(0.1, 0.1)), [0, 2, 2], 0.2, [0, 0, 50], dict(lam_p_minus=[0, 0, -0.3]),
                     dict(p_flex_min=[0, 0, -1], gen_cap=[0, 0, 3], load_cap=[0, 0, 0]), 1.0),
    "thermal": (dict(r=(0.02, 0.02), s_max=(1.0, 0.25)), [0, 5, 27], 0.2, [0, 0, 0], dict(lam_p_plus=[0, 0, 0.2]),
                dict(p_flex_max=[0, 0, 1], load_cap=[0, 0, 3]), 0.0),
}
OV_NOLOSS = (dict(r=(0.1, 0.1)), [0, 2, 2], 0.2, [0, 0, 50], dict(lam_p_minus=[0, 0, -0.3]),
             dict(p_flex_min=[0, 0, -3], gen_cap=[0, 0, 0], load_cap=[0, 0, 0]), 0.0)


def build(case):
    nk, p, qr, g, fk, ek, lam = case
    net = chain_network(**nk)
    loads = np.array(p, float) * (1 + 1j * qr)
    gens = np.array(g, float)
    return net, loads, gens, signal(3, **fk), envelope(loads, gens, **ek), RdopfConfig(lambda_loss=lam, **PRICES)


@pytest.mark.parametrize("name", sorted(CASES))
def test_matches_brute_force(name):
    net, loads, gens, fas, env, cfg = build(CASES[name])
    bf, _ = brute_force_dispatch(net, loads, gens, fas, env, cfg)
    soc = solve_soc_rdopf(net, loads, gens, fas, env, cfg)
    ac = solve_ac_rdopf(net, loads, gens, fas, env, cfg)
    assert abs(soc.objective - bf) <= 1e-3
    assert abs(ac.objective - bf) <= 1e-3
    assert soc.objective <= ac.objective + 1e-7
    assert verify_ac_feasibility(net, ac, loads, gens, cfg).passed


def test_loose_relaxation_over_voltage():
    """Without a loss price the relaxation can absorb surplus as fictitious losses."""
    net, loads, gens, fas, env, cfg = build(OV_NOLOSS)
    bf, _ = brute_force_dispatch(net, loads, gens, fas, env, cfg)
    soc = solve_soc_rdopf(net, loads, gens, fas, env, cfg)
    ac = solve_ac_rdopf(net, loads, gens, fas, env, cfg)
    assert abs(ac.objective - bf) <= 1e-3
    assert soc.objective <= ac.objective
    assert np.max(soc.cone_slack) > 1e-4
    report = verify_ac_feasibility(net, soc, loads, gens, cfg)
    assert not report.passed and report.max_v_violation > 1e-3


def test_no_violation_no_dispatch():
    net = chain_network()
    loads = np.array([0, 3, 3]) * (1 + 0.2j)
    gens = np.zeros(3)
    fas, env = signal(3), envelope(loads, gens)
    res = solve_soc_rdopf(net, loads, gens, fas, env, RdopfConfig(**PRICES))
    assert res.objective == 0
    for a in (res.dp_plus, res.dp_minus, res.load_curt, res.gen_curt):
        assert not a.any()
    np.testing.assert_allclose(res.duals, 0.0, atol=1e-6)
    assert verify_ac_feasibility(net, res, loads, gens).passed


def test_loss_only_objective():
    net = chain_network()
    loads = np.array([0, 3, 3]) * (1 + 0.2j)
    gens = np.zeros(3)
    cfg = RdopfConfig(lambda_loss=0.4, **PRICES)
    res = solve_ac_rdopf(net, loads, gens, signal(3), envelope(loads, gens, load_cap=[0, 0, 0], gen_cap=[0, 0, 0]), cfg)
    rho = solve_power_flow(net, (gens - loads) / net.s_base_kva).total_loss_kw
    assert not res.dp_plus.any()
    assert res.objective == pytest.approx(0.4 * rho * STEP_HOURS, rel=1e-6)


def test_binding_voltage_dual_nonzero():
    net, loads, gens, fas, env, cfg = build(CASES["uv_flex"])
    res = solve_soc_rdopf(net, loads, gens, fas, env, cfg)
    assert res.v_mag[2] == pytest.approx(0.92, abs=1e-6)
    assert abs(res.duals[2]) > 1e-6
    assert extract_power_balance_duals([res]).shape == (3, 1)


def test_duals_require_optimal():
    net, loads, gens, fas, env, cfg = build(CASES["uv_flex"])
    res = solve_soc_rdopf(net, loads, gens, fas, env, cfg)
    res.duals = None
    with pytest.raises(SolverError):
        extract_power_balance_duals([res])


def test_infeasible_without_resources():
    net, loads, gens, fas, _, cfg = build(CASES["uv_flex"])
    env = envelope(loads, gens, load_cap=[0, 0, 0])
    with pytest.raises(InfeasibleError):
        solve_soc_rdopf(net, loads, gens, fas, env, cfg)


def test_config_validation():
    with pytest.raises(ValidationError):
        RdopfConfig(lambda_loss=-1)
    with pytest.raises(ValidationError):
        RdopfConfig(formulation="DC")


def test_write_dispatch(tmp_path):
    net, loads, gens, fas, env, cfg = build(CASES["uv_curt"])
    res = solve_soc_rdopf(net, loads, gens, fas, env, cfg)
    write_dispatch(net, [res], tmp_path / "d.csv", tmp_path / "d.json")
    assert len((tmp_path / "d.csv").read_text().splitlines()) == 4


def random_instance(rng):
    kind = rng.choice(["uv", "ov"])
    r = tuple(rng.uniform(0.04, 0.12, 2))
    if kind == "uv":
        loads = np.array([0, *rng.uniform(5, 30, 2)]) * (1 + 0.2j)
        gens = np.zeros(3)
    else:
        loads = np.array([0, *rng.uniform(0, 3, 2)]) * (1 + 0.2j)
        gens = np.array([0, *rng.uniform(10, 50, 2)])
    lam = float(rng.choice([0.0, 0.5])) if kind == "uv" else 0.5
    chans = ("lam_p_plus", "lam_q_plus") if kind == "uv" else ("lam_p_minus", "lam_q_minus")
    sign = 1 if kind == "uv" else -1
    fk = {c: [0, *(sign * rng.uniform(0.05, 0.3, 2) * (rng.random(2) < 0.7))] for c in chans}
    raw = {"p_flex_max" if kind == "uv" else "p_flex_min": [0, *(sign * rng.uniform(0.5, 4, 2))],
           "q_flex_max" if kind == "uv" else "q_flex_min": [0, *(sign * rng.uniform(0.5, 4, 2))]}
    return chain_network(r=r), loads, gens, fk, raw, RdopfConfig(lambda_loss=lam, **PRICES)


def test_gating_equivalence():
    rng = np.random.default_rng(7)
    chan_of = {"p_flex_max": "lam_p_plus", "p_flex_min": "lam_p_minus",
               "q_flex_max": "lam_q_plus", "q_flex_min": "lam_q_minus"}
    checked = 0
    while checked < 50:
        net, loads, gens, fk, raw, cfg = random_instance(rng)
        fas = signal(3, **fk)
        # gated bounds: raw bound times the FAS indicator
        gated = {b: np.where(np.array(fk.get(chan_of[b], [0, 0, 0])) != 0, v, 0.0) for b, v in raw.items()}
        try:
            obj = solve_soc_rdopf(net, loads, gens, fas, envelope(loads, gens, **gated), cfg).objective
        except InfeasibleError:
            continue
        slots = [(b, k) for b, v in gated.items() for k in range(3) if v[k] != 0]

        def solve(bits):
            bounds = {b: np.zeros(3) for b in raw}
            for (b, k), z in zip(slots, bits):
                bounds[b][k] = z * raw[b][k]
            try:
                return solve_soc_rdopf(net, loads, gens, fas, envelope(loads, gens, **bounds), cfg).objective
            except InfeasibleError:
                return np.inf

        assert abs(obj - binary_enumeration(solve, len(slots))) <= 1e-6
        checked += 1


def test_curtailment_last():
    """With enough gated capacity the curtailment channels stay unused."""
    rng = np.random.default_rng(11)
    for _ in range(10):
        load = rng.uniform(20, 30)
        net = chain_network(r=(0.1, 0.1))
        loads = np.array([0, 10, load]) * (1 + 0.2j)
        gens = np.zeros(3)
        fas = signal(3, lam_p_plus=[0, 0, rng.uniform(0.05, 0.3)])
        env = envelope(loads, gens, p_flex_max=[0, 0, 6])
        res = solve_ac_rdopf(net, loads, gens, fas, env, RdopfConfig(**PRICES))
        assert res.load_curt.max() < 1e-6 and res.gen_curt.max() < 1e-6


@pytest.mark.parametrize("name", sorted(CASES) + ["ov_noloss"])
def test_soc_matches_clarabel(name):
    net, loads, gens, fas, env, cfg = build(CASES.get(name, OV_NOLOSS))
    soc = solve_soc_rdopf(net, loads, gens, fas, env, cfg)
    assert soc.objective == pytest.approx(cvx_soc_relaxation(net, loads, gens, fas, env, cfg), abs=1e-6)
