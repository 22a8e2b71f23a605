import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DATA, mnist_dict, worked_cfg
from edgeplan.config_model import (
    ConfigError,
    Plan,
    builtin_scenario,
    load_plan,
    load_scenario,
    save_plan,
    save_scenario,
    scenario_from_dict,
    validate_plan,
)


# -- built-in scenarios ---------------------------------------------------------------

def test_mnist_builtin_values():
    cfg = builtin_scenario("mnist")
    assert cfg.K == 3
    assert cfg.server.tx_power_w == 0.5
    for d in cfg.devices:
        assert d.p_ave_w == d.p_max_w == 0.5
        assert d.f_max_hz == 360e6 and d.batch_max == 700 and d.pue == 1
        assert d.bw_up_hz == 1e5 and d.noise_up_psd == d.noise_down_psd == 1e-16
    assert [d.power_coeff for d in cfg.devices] == [1.09e-27, 1.56e-27, 2.34e-27]
    s = cfg.server
    assert (s.f_max_hz, s.batch_max, s.pue, s.power_coeff, s.bw_down_hz) == (1.6e9, 700, 4, 3.91e-27, 1e5)
    assert cfg.learning.gamma == 0.01
    assert cfg.learning.model_bits == 0.2e6 and cfg.learning.n_flop == 1e6
    assert (cfg.budgets.tau0_s, cfg.budgets.e0_j) == (1000, 300)


def test_cinic_builtin_values():
    cfg = builtin_scenario("cinic_cifar")
    assert cfg.learning.model_bits == 24e6 and cfg.learning.n_flop == 4e9
    for d in cfg.devices:
        assert d.bw_up_hz == 3e6 and d.noise_up_psd == 3.3e-18 and d.f_max_hz == 900e6
        assert d.batch_max == 500
    assert [d.power_coeff for d in cfg.devices] == [0.7e-28, 1e-28, 1.5e-28]
    s = cfg.server
    assert (s.f_max_hz, s.batch_max, s.power_coeff, s.bw_down_hz) == (4e9, 500, 2.5e-28, 3e6)
    assert (cfg.budgets.tau0_s, cfg.budgets.e0_j) == (3500, 2700)


# -- validation ------------------------------------------------------------------------

def test_rate_condition_rejected():
    d = mnist_dict()
    d["learning"].update(gamma=0.2, rho=10.0)
    with pytest.raises(ConfigError, match="gamma"):
        scenario_from_dict(d)


def test_flops_per_cycle_defaults_to_one(tmp_path):
    d = mnist_dict()
    assert "flops_per_cycle" not in d["server"]
    cfg = scenario_from_dict(d)
    save_scenario(cfg, tmp_path / "s.json")
    again = json.loads((tmp_path / "s.json").read_text())
    assert again["server"]["flops_per_cycle"] == 1.0
    assert all(dev["flops_per_cycle"] == 1.0 for dev in again["devices"])


@pytest.mark.parametrize("section,field,value,msg", [
    ("server", "f_max_hz", 0.0, "f_max_hz"),
    ("budgets", "tau0_s", -1.0, "tau0_s"),
    ("learning", "wdist", -0.5, "wdist"),
])
def test_bad_values_name_the_field(section, field, value, msg):
    d = mnist_dict()
    d[section][field] = value
    with pytest.raises(ConfigError, match=msg):
        scenario_from_dict(d)


def test_average_above_peak_rejected():
    d = mnist_dict()
    d["devices"][1]["p_ave_w"] = 0.7
    with pytest.raises(ConfigError, match="p_ave_w"):
        scenario_from_dict(d)


def test_missing_section_and_unknown_field():
    d = mnist_dict()
    del d["budgets"]
    with pytest.raises(ConfigError, match="budgets"):
        scenario_from_dict(d)
    d = mnist_dict()
    d["server"]["colour"] = 1
    with pytest.raises(ConfigError, match="colour"):
        scenario_from_dict(d)


def test_parse_error_reports_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "devices": [,]\n}')
    with pytest.raises(ConfigError, match="line 2"):
        load_scenario(p)


def test_search_space_invariants():
    d = mnist_dict()
    d["search"] = {"m_max": 0, "n_max": 0}
    with pytest.raises(ConfigError):
        scenario_from_dict(d)
    d["search"] = {"m_max": 10, "n_max": 7, "m_step": 4, "n_step": 3}
    cfg = scenario_from_dict(d)
    assert cfg.search.m_values() == [0, 4, 8, 10]
    assert cfg.search.n_values() == [0, 3, 6, 7]


def test_rayleigh_channel_seeded():
    d = mnist_dict()
    for dev in d["devices"]:
        del dev["g_up"], dev["g_down"]
    d["channel"] = {"model": "rayleigh", "path_loss": 1e-5, "seed": 4}
    a, b = scenario_from_dict(d), scenario_from_dict(d)
    assert [x.g_up for x in a.devices] == [x.g_up for x in b.devices]
    assert len({x.g_up for x in a.devices}) == 3
    # mean power gain equals the path loss
    d["devices"] = [dict(d["devices"][0], id=k) for k in range(2000)]
    big = scenario_from_dict(d)
    assert np.mean([x.g_up for x in big.devices]) == pytest.approx(1e-5, rel=0.1)


def test_per_round_gains_need_enough_entries():
    d = mnist_dict()
    d["search"]["n_max"] = 3
    d["devices"][0]["g_up"] = [1e-5, 2e-5]
    with pytest.raises(ConfigError, match="shorter"):
        scenario_from_dict(d)


# -- plan validation --------------------------------------------------------------------

def _plan(p, K=3):
    p = np.asarray(p, dtype=float)
    n = p.shape[-1]
    return Plan(0, n, np.zeros(0), np.zeros(0), np.full((K, n), 10.0), np.full((K, n), 1e8),
                np.broadcast_to(p, (K, n)).copy())


def test_validate_plan_power_at_budget():
    assert validate_plan(worked_cfg(), _plan([0.5, 0.5])) == []


def test_validate_plan_peak_excess():
    p = np.full((3, 2), 0.5)
    p[0, 1] = 0.6
    v = validate_plan(worked_cfg(), _plan(p))
    peak = [x for x in v if x.constraint == "device0_power_peak"]
    assert len(peak) == 1 and peak[0].excess == pytest.approx(0.1)


def test_validate_plan_average_exactly_met():
    d = mnist_dict()
    for dev in d["devices"]:
        dev["p_max_w"] = 1.0
    v = validate_plan(scenario_from_dict(d), _plan([0.9, 0.1]))
    assert not [x for x in v if "average" in x.constraint]


def test_validate_plan_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        validate_plan(worked_cfg(), _plan([0.5], K=2))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2), st.integers(0, 3), st.floats(1.0, 3.0))
def test_validate_plan_monotone_in_power(k, r, factor):
    rng = np.random.default_rng(k * 7 + r)
    p = rng.uniform(0.1, 0.7, (3, 4))
    before = {v.constraint for v in validate_plan(worked_cfg(), _plan(p))}
    p2 = p.copy()
    p2[k, r] *= factor
    after = {v.constraint for v in validate_plan(worked_cfg(), _plan(p2))}
    assert before <= after


# -- serialization round trips ------------------------------------------------------------

finite = st.floats(min_value=1e-30, max_value=1e30, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(finite, finite, finite, st.floats(0.0, 1e3))
def test_scenario_round_trip_bit_exact(tmp_path_factory, g, bw, phi, wdist):
    d = mnist_dict()
    d["devices"][0].update(g_up=g, bw_up_hz=bw, power_coeff=phi)
    d["learning"]["wdist"] = wdist
    cfg = scenario_from_dict(d)
    path = tmp_path_factory.mktemp("rt") / "s.json"
    save_scenario(cfg, path)
    assert load_scenario(path) == cfg


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 4), st.integers(0, 4), st.integers(0, 2**31))
def test_plan_round_trip_bit_exact(tmp_path_factory, m, n, seed):
    rng = np.random.default_rng(seed)
    plan = Plan(m, n, rng.random(m) * 700, rng.random(m) * 1e9, rng.random((3, n)) * 700,
                rng.random((3, n)) * 1e8, rng.random((3, n)))
    path = tmp_path_factory.mktemp("rt") / "p.json"
    save_plan(plan, path)
    back = load_plan(path, K=3)
    for f in ("d_batch", "f_server", "b_batch", "f_device", "p_up"):
        a, b = getattr(plan, f), getattr(back, f)
        assert a.shape == b.shape and np.array_equal(a, b)
    assert (back.m, back.n) == (m, n)


def test_every_builtin_loads():
    for p in DATA.glob("*.json"):
        assert builtin_scenario(p.stem).K >= 1
