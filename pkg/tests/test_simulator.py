import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_plan, worked_cfg
from edgeplan.config_model import Plan
from edgeplan.link_metrics import totals
from edgeplan.simulator import (
    MIN_SEEDS,
    QuadraticTask,
    bound_for,
    check_lemma_inequalities,
    grid_oracle,
    monte_carlo,
    random_scenario,
    random_task,
    replay_ledger,
    run_synthetic_sgd,
    write_trace_csv,
)


# -- replay ------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_replay_matches_vectorised_totals(seed):
    rng = np.random.default_rng(seed)
    cfg = random_scenario(rng, K=int(rng.integers(1, 4)))
    plan = random_plan(rng, cfg)
    a, b = replay_ledger(cfg, plan), totals(cfg, plan)
    assert a.total_delay_s == pytest.approx(b.total_delay_s, rel=1e-12, abs=0)
    assert a.total_energy_j == pytest.approx(b.total_energy_j, rel=1e-12, abs=0)
    assert a.feasible == b.feasible
    assert [v.constraint for v in a.violations] == [v.constraint for v in b.violations]


def test_removing_a_round_drops_its_ledger(worked):
    base = Plan.uniform(2, 3, 3, d=700, f=1.6e9, b=700, fh=3.6e8, p=0.5)
    b = base.b_batch.copy()
    b[:, 1] = 100
    plan = Plan(2, 3, base.d_batch, base.f_server, b, base.f_device, base.p_up)
    short = Plan(2, 2, plan.d_batch, plan.f_server, plan.b_batch[:, [0, 2]], plan.f_device[:, [0, 2]],
                 plan.p_up[:, [0, 2]])
    full, cut = replay_ledger(worked, plan), replay_ledger(worked, short)
    dropped = full.per_round_delay["finetune"][1]
    assert full.total_delay_s - cut.total_delay_s == pytest.approx(dropped, rel=1e-12)
    assert full.total_energy_j - cut.total_energy_j == pytest.approx(full.per_round_energy["finetune"][1], rel=1e-12)


def test_replay_empty_plan(worked):
    empty = Plan(0, 0, np.zeros(0), np.zeros(0), np.zeros((3, 0)), np.zeros((3, 0)), np.zeros((3, 0)))
    rep = replay_ledger(worked, empty)
    assert rep.total_delay_s == 0 and not rep.feasible
    assert rep.violations[0].constraint == "empty_plan"


# -- grid oracle ---------------------------------------------------------------------

def test_grid_refinement_never_worsens():
    cfg = random_scenario(np.random.default_rng(7), K=1)
    vals = [grid_oracle(cfg, 2, 2, resolution=r).upsilon for r in (2, 4, 8, 16)]
    assert all(np.isfinite(vals[1:]))
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_grid_oracle_best_plan_is_feasible():
    cfg = random_scenario(np.random.default_rng(3), K=1)
    res = grid_oracle(cfg, 1, 2, resolution=8)
    assert res.feasible
    rep = totals(cfg, res.plan)
    assert rep.feasible and rep.upsilon == pytest.approx(res.upsilon, rel=1e-12)


def test_grid_oracle_refuses_huge_grids(worked):
    with pytest.raises(ValueError, match="points"):
        grid_oracle(worked, 1, 1, resolution=50)


# -- synthetic SGD and the descent checks ------------------------------------------------------

def _task(**kw):
    base = dict(dim=3, rho=1.0, rho_hat=2.0, alpha=1.0, alpha_hat=1.0, w_pre=np.zeros(3),
                w_fine=np.ones(3), w0=np.full(3, 4.0), gamma=0.25)
    base.update(kw)
    return QuadraticTask(**base)


def test_step_size_condition():
    with pytest.raises(ValueError, match="step size"):
        _task(gamma=0.6)


def test_too_few_seeds():
    task, plan = _task(), Plan.uniform(1, 1, 2, d=10, f=1, b=10, fh=1, p=1)
    with pytest.raises(ValueError, match=str(MIN_SEEDS)):
        check_lemma_inequalities(monte_carlo(task, plan, range(MIN_SEEDS - 1)), task, plan)


def test_no_finetuning_gives_trivial_inequality():
    task = _task()
    plan = Plan(3, 0, np.full(3, 5.0), np.ones(3), np.zeros((2, 0)), np.zeros((2, 0)), np.zeros((2, 0)))
    rep = check_lemma_inequalities(monte_carlo(task, plan, range(40)), task, plan)
    c = rep["finetune_descent"]
    assert c.lhs == 0.0 and c.rhs == 0.0 and c.holds
    assert rep["pretrain_descent"].holds


def test_noiseless_finetune_is_tight_at_largest_step():
    task = _task(alpha_hat=0.0, gamma=0.5)          # gamma = 1 / rho_hat
    plan = Plan.uniform(0, 3, 2, d=1, f=1, b=7, fh=1, p=1)
    rep = check_lemma_inequalities(monte_carlo(task, plan, range(30)), task, plan)
    c = rep["finetune_descent"]
    assert c.rhs == 0.0 and c.stderr == 0.0
    assert abs(c.lhs) <= 1e-12 and c.holds


def test_zero_noise_at_optimum_stays_put():
    w = np.array([0.3, -1.0, 2.0])
    task = _task(alpha=0.0, alpha_hat=0.0, w_pre=w, w_fine=w, w0=w)
    tr = run_synthetic_sgd(task, Plan.uniform(2, 2, 2, d=5, f=1, b=5, fh=1, p=1), seed=1)
    assert np.all(tr.grad_norm_sq == 0.0) and tr.final_loss_fine == 0.0


def test_noiseless_geometric_decay():
    task = _task(alpha=0.0, alpha_hat=0.0, rho_hat=1.0, gamma=0.5)
    plan = Plan.uniform(0, 40, 2, d=1, f=1, b=3, fh=1, p=1)
    g = run_synthetic_sgd(task, plan, seed=0).grad_norm_sq
    ratios = g[1:] / g[:-1]
    keep = g[:-1] > 1e-10
    assert ratios[keep] == pytest.approx(0.25, rel=1e-9)
    assert g[-1] < 1e-10 * g[0]


def test_deterministic_traces_and_csv(tmp_path):
    task, plan = _task(), Plan.uniform(2, 3, 2, d=10, f=1, b=10, fh=1, p=1)
    a, b = run_synthetic_sgd(task, plan, 5), run_synthetic_sgd(task, plan, 5)
    assert np.array_equal(a.grad_norm_sq, b.grad_norm_sq)
    assert not np.array_equal(a.grad_norm_sq, run_synthetic_sgd(task, plan, 6).grad_norm_sq)
    path = tmp_path / "t.csv"
    write_trace_csv(a, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["stage", "round", "grad_norm_sq", "loss"]
    assert [r[0] for r in rows[1:]] == ["pretrain"] * 2 + ["finetune"] * 3
    assert float(rows[3][2]) == a.grad_norm_sq[2]


def test_fractional_batches_rejected():
    with pytest.raises(ValueError):
        run_synthetic_sgd(_task(), Plan.uniform(1, 0, 2, d=0.5, f=1, b=1, fh=1, p=1), 0)


@pytest.mark.parametrize("seed", range(4))
def test_bound_holds_on_random_tasks(seed):
    rng = np.random.default_rng(seed)
    task = random_task(rng, alpha=float(rng.uniform(0.5, 3)), alpha_hat=float(rng.uniform(0.5, 3)),
                       shift=float(rng.uniform(0, 2)))
    m, n = int(rng.integers(0, 6)), int(rng.integers(1, 6))
    plan = Plan(m, n, rng.integers(1, 50, m).astype(float), np.ones(m),
                rng.integers(1, 50, (3, n)).astype(float), np.ones((3, n)), np.ones((3, n)))
    ups = bound_for(task, plan)
    rep = check_lemma_inequalities(monte_carlo(task, plan, range(100)), task, plan, upsilon=ups)
    assert rep.holds, [(c.name, c.lhs, c.rhs, c.stderr) for c in rep.checks]
    assert rep["average_gradient"].lhs <= ups
