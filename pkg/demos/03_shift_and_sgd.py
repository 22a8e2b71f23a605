# %% [markdown]
# Two views of the distribution shift.  First, a sweep of the shift distance:
# as pre-training grows more expensive in bound terms, the plan moves effort
# to fine-tuning.  Second, a Monte-Carlo run of quadratic SGD under a fixed
# plan, checked against the bound.

# %%
import numpy as np

from edgeplan.config_model import Plan, builtin_scenario
from edgeplan.planner import sweep
from edgeplan.simulator import bound_for, check_lemma_inequalities, monte_carlo, random_task

cfg = builtin_scenario("mnist").with_search(m_step=500, n_step=400)
rows = sweep(cfg, "wdist", [0.0, 0.1, 0.2, 0.3])
for r in rows:
    print(f"wdist={r['value']:.2f}  M={r['m']:>5} N={r['n']:>5}  pre-train energy {r['pretrain_energy']:.4g} J"
          f"  fine-tune energy {r['finetune_energy']:.4g} J")

# %%
rng = np.random.default_rng(0)
task = random_task(rng, dim=4, rho=1.0, rho_hat=1.5, alpha=2.0, alpha_hat=2.0, shift=0.5)
plan = Plan(3, 5, np.array([8.0, 16.0, 32.0]), np.ones(3), np.full((3, 5), 20.0), np.ones((3, 5)), np.ones((3, 5)))
ups = bound_for(task, plan)
rep = check_lemma_inequalities(monte_carlo(task, plan, range(200)), task, plan, ups)
for c in rep.checks:
    print(f"{c.name:<18} mean {c.lhs:.5g}  bound {c.rhs:.5g}  (se {c.stderr:.2g})  {'ok' if c.holds else 'FAIL'}")
