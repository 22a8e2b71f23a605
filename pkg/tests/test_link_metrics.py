import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftest import random_plan, worked_cfg
from edgeplan.config_model import Plan
from edgeplan.link_metrics import (
    download_delays,
    downlink_rate,
    finetune_energy_components,
    finetune_round_delay,
    pretrain_delay,
    pretrain_energy,
    round_ledgers,
    shannon_rate,
    totals,
    upload_delays,
    uplink_rate,
)

# Reference values computed once at 40 significant digits (mpmath) from the
# closed-form rate, delay and energy expressions; frozen here.
RATE = 1893157.145471137047891413        # bits/s at g=1e-5, p=0.5, W=1e5, N0=1e-16
T_LINK = 0.1056436336932966915925        # 2e5 bits at RATE
RATE_2W = 3586314.868018559222705167
E_COMPUTE = 0.0988848                    # 700 * 1e6 * 1.09e-27 * (3.6e8)^2
E_UPLOAD = 0.05282181684664834579625
ROUND_DELAY = 2.155731711831037827629
TOTAL_DELAY = 2.593231711831037827629
TOTAL_ENERGY = 28.53482166738659338318


@pytest.fixture
def cfg():
    return worked_cfg()


def one_one(cfg):
    return Plan.uniform(1, 1, cfg.K, d=700, f=1.6e9, b=700, fh=3.6e8, p=0.5)


def test_uplink_rate_worked(cfg):
    assert uplink_rate(cfg.devices[0], 0.5) == pytest.approx(1.89316e6, rel=1e-3)
    assert uplink_rate(cfg.devices[0], 0.5) == pytest.approx(RATE, rel=1e-14)


def test_rate_zero_cases(cfg):
    assert uplink_rate(cfg.devices[0], 0.0) == 0.0
    assert shannon_rate(1e5, 1e-5, 0.0, 1e-16) == 0.0        # no server power
    assert shannon_rate(1e5, 0.0, 0.5, 1e-16) == 0.0         # no gain


def test_rate_less_than_doubles_with_bandwidth():
    r1 = shannon_rate(1e5, 1e-5, 0.5, 1e-16)
    r2 = shannon_rate(2e5, 1e-5, 0.5, 1e-16)
    assert r2 == pytest.approx(RATE_2W, rel=1e-14)
    assert r1 < r2 < 2 * r1


def test_downlink_rate_worked(cfg):
    assert downlink_rate(cfg.devices[0], cfg.server) == pytest.approx(RATE, rel=1e-14)


def test_pretrain_delay_and_energy(cfg):
    s, l = cfg.server, cfg.learning
    assert pretrain_delay(s, l, [700], [1.6e9]) == pytest.approx(0.4375, rel=1e-15)
    assert pretrain_energy(s, l, [700], [1.6e9]) == pytest.approx(28.02688, rel=1e-14)
    assert pretrain_delay(s, l, [], []) == 0.0 and pretrain_energy(s, l, [], []) == 0.0
    assert pretrain_delay(s, l, [700, 700], [1.6e9] * 2) == 2 * pretrain_delay(s, l, [700], [1.6e9])
    e1 = pretrain_energy(s, l, [700], [1.6e9])
    assert pretrain_energy(s, l, [700], [0.8e9]) == pytest.approx(e1 / 4, rel=1e-15)


def test_pretrain_zero_clock_rejected(cfg):
    with pytest.raises(ValueError):
        pretrain_delay(cfg.server, cfg.learning, [10], [0.0])


def test_round_delay_worked(cfg):
    b, f, p = np.full(3, 700.0), np.full(3, 3.6e8), np.full(3, 0.5)
    assert finetune_round_delay(cfg, b, f, p) == pytest.approx(ROUND_DELAY, rel=1e-14)
    assert finetune_round_delay(cfg, b, f, p) == pytest.approx(0.10564 + 1.94444 + 0.10564, rel=1e-5)


def test_round_delay_max_structure(cfg):
    b, f, p = np.full(3, 700.0), np.full(3, 3.6e8), np.full(3, 0.5)
    f_slow = f.copy()
    f_slow[1] /= 2
    assert finetune_round_delay(cfg, b, f_slow, p) == pytest.approx(2 * T_LINK + 2 * 700e6 / 3.6e8, rel=1e-14)
    zero = finetune_round_delay(cfg, np.zeros(3), f, p)
    assert zero == pytest.approx(2 * T_LINK, rel=1e-14)


def test_energy_components_worked(cfg):
    b, f, p = np.full(3, 700.0), np.full(3, 3.6e8), np.full(3, 0.5)
    comp, up, dl = finetune_energy_components(cfg, b, f, p)
    assert comp == pytest.approx(np.full(3, E_COMPUTE), rel=1e-14)
    assert up == pytest.approx(np.full(3, E_UPLOAD), rel=1e-14)
    assert dl == pytest.approx(0.5 * T_LINK, rel=1e-14)
    assert up[0] == 0.5 * upload_delays(cfg, p)[0]           # identity, no tolerance


def test_totals_worked(cfg):
    rep = totals(cfg, one_one(cfg))
    assert rep.total_delay_s == pytest.approx(TOTAL_DELAY, rel=1e-14)
    assert rep.total_energy_j == pytest.approx(TOTAL_ENERGY, rel=1e-14)
    assert rep.total_energy_j == pytest.approx(28.02688 + 3 * (E_COMPUTE + E_UPLOAD) + E_UPLOAD, rel=1e-14)
    assert rep.feasible and rep.violations == ()


def test_empty_plan_infeasible(cfg):
    empty = Plan(0, 0, np.zeros(0), np.zeros(0), np.zeros((3, 0)), np.zeros((3, 0)), np.zeros((3, 0)))
    rep = totals(cfg, empty)
    assert rep.total_delay_s == 0 and rep.total_energy_j == 0
    assert rep.upsilon is None and not rep.feasible
    assert rep.violations[0].constraint == "empty_plan"


def test_zero_power_upload_is_infinite_and_infeasible(cfg):
    plan = Plan.uniform(0, 1, 3, d=1, f=1, b=10, fh=1e8, p=[0.5, 0.0, 0.5])
    rep = totals(cfg, plan)
    assert math.isinf(rep.total_delay_s) and not rep.feasible


def test_feasible_iff_budgets(cfg):
    plan = one_one(cfg)
    rep = totals(cfg, plan)
    tight = totals(cfg.with_budgets(tau0_s=rep.total_delay_s * (1 - 1e-9)), plan)
    assert [v.constraint for v in tight.violations] == ["delay_budget"]
    tight = totals(cfg.with_budgets(e0_j=rep.total_energy_j * (1 - 1e-9)), plan)
    assert [v.constraint for v in tight.violations] == ["energy_budget"]
    assert totals(cfg.with_budgets(tau0_s=rep.total_delay_s, e0_j=rep.total_energy_j), plan).feasible


def test_per_round_gains(cfg):
    from edgeplan.config_model import replace

    dev = replace(cfg.devices[0], g_up=(1e-5, 2e-5))
    c2 = replace(cfg.with_search(n_max=2), devices=(dev,) + cfg.devices[1:])
    assert upload_delays(c2, [0.5] * 3, 1)[0] < upload_delays(c2, [0.5] * 3, 0)[0]
    assert download_delays(c2, 1)[0] == download_delays(c2, 0)[0]
    plan = Plan.uniform(0, 2, 3, d=1, f=1, b=700, fh=3.6e8, p=0.5)
    led = round_ledgers(c2, plan)
    assert totals(c2, plan).total_energy_j == pytest.approx(sum(r.energy for r in led), rel=1e-13)


# -- properties ------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 10.0), st.floats(1e-4, 10.0))
def test_uplink_rate_strictly_increasing(p1, p2):
    dev = worked_cfg().devices[0]
    if p1 != p2:
        lo, hi = sorted((p1, p2))
        assert uplink_rate(dev, lo) < uplink_rate(dev, hi)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e7, 1.6e9), st.floats(1.01, 5.0), st.floats(1, 700))
def test_pretrain_monotone_in_clock(f, k, d):
    cfg = worked_cfg()
    s, l = cfg.server, cfg.learning
    assert pretrain_delay(s, l, [d], [f * k]) < pretrain_delay(s, l, [d], [f])
    assert pretrain_energy(s, l, [d], [f * k]) > pretrain_energy(s, l, [d], [f])


@settings(max_examples=80, deadline=None)
@given(st.floats(1e-6, 1e-3), st.floats(1e-3, 5.0), st.floats(1e-4, 1.0))
def test_upload_energy_concave_in_power(g, p, h):
    assume(p > h)
    bits, W, N0 = 2e5, 1e5, 1e-16

    def e(q):
        return q * bits / shannon_rate(W, g, q, N0)

    assert e(p + h) - 2 * e(p) + e(p - h) <= 1e-12 * e(p)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_totals_equal_sum_of_round_ledgers(seed):
    rng = np.random.default_rng(seed)
    cfg = worked_cfg()
    plan = random_plan(rng, cfg, integer=False)
    rep = totals(cfg, plan)
    led = round_ledgers(cfg, plan)
    d = math.fsum(r.round_delay for r in led)
    e = math.fsum(r.energy for r in led)
    assert rep.total_delay_s == pytest.approx(d, rel=1e-12, abs=0)
    assert rep.total_energy_j == pytest.approx(e, rel=1e-12, abs=0)
    per = np.concatenate([rep.per_round_delay["pretrain"], rep.per_round_delay["finetune"]])
    assert float(np.sum(per)) == pytest.approx(rep.total_delay_s, rel=1e-12, abs=0)
