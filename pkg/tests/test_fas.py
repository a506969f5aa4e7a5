import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnflex.errors import DegenerateTableError, ValidationError
from dnflex.fas import (FasConfig, FasSignal, SaturationLevels, compute_fas, droop_thermal, droop_voltage,
                        fas_from_measurements, gate_envelopes, project_loadings, raw_bounds, saturation_levels,
                        write_fas_csv)
from dnflex.network import Branch, Network, Node, Profiles
from dnflex.powerflow import NetworkState
from dnflex.sensitivity import SensitivityTable

CFG = FasConfig()


def levels(vc_p=0.3, tc_p=0.2, vc_q=0.1, tc_q=0.05):
    return SaturationLevels(*(np.array([x]) for x in (vc_p, tc_p, vc_q, tc_q)))


def evaluate(v, t=0.0, lv=None):
    return fas_from_measurements(np.array([v]), np.array([t]), lv or levels(), CFG)


def table(psi, beta):
    n = len(psi)
    return SensitivityTable(tuple(range(n)), np.array(psi), np.array(beta), 1, 0, np.array([psi]), np.array([beta]))


def test_saturated_over_voltage():
    assert evaluate(1.08).lam_p_minus[0] == -0.3
    assert evaluate(1.08).lam_q_minus[0] == -0.1


def test_half_over_voltage():
    assert evaluate(1.06).lam_p_minus[0] == pytest.approx(-0.15, abs=1e-12)


def test_inner_thresholds_exactly_zero():
    for v in (1.04, 0.96):
        sig = evaluate(v, 75.0)
        assert all(float(a[0]) == 0.0 for a in (sig.lam_p_plus, sig.lam_p_minus, sig.lam_q_plus, sig.lam_q_minus))


def test_outer_limits_exactly_saturated():
    assert evaluate(0.92).lam_p_plus[0] == 0.3
    assert evaluate(1.0, 100.0).lam_p_plus[0] == 0.2
    assert evaluate(1.0, -100.0).lam_p_minus[0] == -0.2
    assert evaluate(1.0, -100.0).lam_q_minus[0] == -0.05


def test_midpoints():
    assert evaluate(0.94).lam_p_plus[0] == pytest.approx(0.15, abs=1e-12)
    assert evaluate(1.0, 87.5).lam_q_plus[0] == pytest.approx(0.025, abs=1e-12)
    assert evaluate(1.0, -87.5).lam_p_minus[0] == pytest.approx(-0.1, abs=1e-12)


def test_inside_band_all_zero():
    sig = evaluate(1.0, 50.0)
    assert not sig.active().any()


def test_projection_rules(feeder, nominal_states):
    net = Network([Node(0, "substation"), Node(1, "junction"), Node(2, "prosumer", 0, 0, 5, True),
                   Node(3, "prosumer", 0, 0, 5, True)],
                  [Branch(0, 1, .01, .01, 1), Branch(1, 2, .01, .01, 1), Branch(1, 3, .01, .01, 1)], 0)
    z = np.zeros(3)
    state = NetworkState(0, np.ones(4), np.zeros(4), z, z, np.array([40.0, -90.0, 10.0]), z, 0.0, 0j, 0.0, 0)
    assert project_loadings(net, state)[1] == -90.0
    flat = NetworkState(0, np.ones(4), np.zeros(4), z, z, z, z, 0.0, 0j, 0.0, 0)
    np.testing.assert_array_equal(project_loadings(net, flat), 0.0)


def test_fixture_evening_overload(feeder, nominal_states):
    net, _ = feeder
    hot = set()
    for s in nominal_states[72:88]:
        proj = project_loadings(net, s)
        hot |= {net.node_ids[k] for k in np.flatnonzero(np.abs(proj) >= 100)}
    # the spur-limited service connections at node 1 (substation spur) and the far prosumer 16 overload
    assert {1, 16} <= hot


def test_saturation_levels():
    lv = saturation_levels(table([0.0, 1.0, 2.0], [0.0, 4.0, 1.0]), CFG)
    np.testing.assert_array_equal(lv.vc_p, [0.0, 0.1, 0.2])
    np.testing.assert_array_equal(lv.tc_q, [0.0, 0.2, 0.05])
    np.testing.assert_array_equal(lv.tc_p, lv.tc_q)  # thermal P level follows beta by default
    alt = saturation_levels(table([0.0, 1.0, 2.0], [0.0, 4.0, 1.0]), FasConfig(thermal_p_from_beta=False))
    np.testing.assert_array_equal(alt.tc_p, [0.0, 0.1, 0.2])


def test_zero_table():
    zero = table([0.0, 0.0], [0.0, 0.0])
    with pytest.raises(DegenerateTableError):
        saturation_levels(zero, CFG)
    lv = saturation_levels(zero, FasConfig(kappa_v=0.0, kappa_t=0.0))
    assert not lv.vc_p.any() and not lv.tc_q.any()


def test_fixture_levels(feeder, sens):
    net, _ = feeder
    lv = saturation_levels(sens, CFG)
    assert lv.vc_p.max() == pytest.approx(0.2)
    for arr in (lv.vc_p, lv.tc_p, lv.vc_q, lv.tc_q):
        assert np.all(arr[~net.flexible_mask] == 0)


@pytest.mark.parametrize("kwargs", [dict(v_min=1.01), dict(dv_perm=0.09), dict(dt_perm=100),
                                    dict(kappa_v=-0.1), dict(kappa_v=0.3, kappa_t=0.2)])
def test_config_validation(kwargs):
    with pytest.raises(ValidationError):
        FasConfig(**kwargs)


def fixed_profiles(load):
    load = np.array(load, float)[:, None]
    return Profiles(tuple(range(len(load))), load, 0.2 * load, np.zeros_like(load))


def test_level_rule():
    net = Network([Node(0, "substation"), Node(1, "prosumer", 0, 0, 10, True)], [Branch(0, 1, .01, .01, 1)], 0)
    p_max, p_min, q_max, q_min = raw_bounds(net, fixed_profiles([0.0, 8.0]), 25)
    assert (p_max[1, 0], p_min[1, 0]) == (2.0, -2.0)
    assert q_max[1, 0] == pytest.approx(0.4) and q_min[1, 0] == pytest.approx(-0.4)
    with pytest.raises(ValidationError):
        raw_bounds(net, fixed_profiles([0.0, 8.0]), -5)


def test_gating():
    prof = fixed_profiles([0.0, 8.0])
    raw = tuple(np.array([[0.0], [v]]) for v in (2.0, -2.0, 0.4, -0.4))
    closed = FasSignal(*(np.zeros((2, 1)) for _ in range(4)))
    env = gate_envelopes(closed, raw, prof)
    assert not any(getattr(env, f).any() for f in ("p_flex_max", "p_flex_min", "q_flex_max", "q_flex_min"))
    np.testing.assert_array_equal(env.load_cap, prof.p_load_kw)
    open_p = FasSignal(np.array([[0.0], [0.1]]), *(np.zeros((2, 1)) for _ in range(3)))
    env = gate_envelopes(open_p, raw, prof)
    assert env.p_flex_max[1, 0] == 2.0 and env.p_flex_min[1, 0] == 0.0
    with pytest.raises(ValidationError):
        gate_envelopes(open_p, (raw[1], raw[1], raw[2], raw[3]), prof)


def test_without_reactive():
    sig = evaluate(0.93)
    assert sig.without_reactive().lam_q_plus[0] == 0 and sig.without_reactive().lam_p_plus[0] == sig.lam_p_plus[0]


def test_fixture_fas(feeder, nominal_states, sens, tmp_path):
    net, _ = feeder
    fas = compute_fas(net, nominal_states, saturation_levels(sens, CFG), CFG)
    assert fas.horizon == 96
    assert np.all(fas.lam_p_plus >= 0) and np.all(fas.lam_p_minus <= 0)
    assert fas.active()[:, 78:82].any()
    write_fas_csv(net, fas, tmp_path / "fas.csv")
    assert len((tmp_path / "fas.csv").read_text().splitlines()) == 1 + 96 * 19


@settings(max_examples=200, deadline=None)
@given(v=st.floats(0.85, 1.15), t=st.floats(-150, 150))
def test_droop_properties(v, t):
    sig = evaluate(v, t)
    for chan, cap in ((sig.lam_p_plus, 0.5), (sig.lam_q_plus, 0.15)):
        assert 0 <= chan[0] <= cap + 1e-15
    for chan, cap in ((sig.lam_p_minus, 0.5), (sig.lam_q_minus, 0.15)):
        assert -cap - 1e-15 <= chan[0] <= 0
    if 0.96 <= v <= 1.04 and abs(t) <= 75:
        assert not sig.active().any()
    under, over = droop_voltage(v, CFG)
    assert under * over == 0
    fwd, rev = droop_thermal(t, CFG)
    assert fwd * rev == 0


@settings(max_examples=100, deadline=None)
@given(a=st.floats(1.04, 1.2), b=st.floats(1.04, 1.2))
def test_over_voltage_droop_monotone(a, b):
    lo, hi = sorted((a, b))
    assert evaluate(hi).lam_p_minus[0] <= evaluate(lo).lam_p_minus[0]
