# %% [markdown]
# Plan the MNIST-scale scenario on a coarse round grid and compare it with the
# five restricted schemes.  The full search grid of the built-in scenario takes
# a couple of minutes; this uses steps of 1000 and 800 rounds.

# %%
from edgeplan.config_model import builtin_scenario
from edgeplan.planner import SCHEMES, NoFeasiblePlan, plan_baseline, plan_optimal

cfg = builtin_scenario("mnist").with_search(m_step=1000, n_step=800)

outs = {}
for s in SCHEMES:
    try:
        outs[s] = plan_baseline(cfg, s)
    except NoFeasiblePlan:
        outs[s] = None
best = plan_optimal(cfg, polish_from=[o for o in outs.values() if o is not None])

# %%
print(f"{'scheme':<14}{'M':>6}{'N':>6}{'bound':>12}{'delay':>10}{'energy':>10}")
for name, o in (("proposed", best), *outs.items()):
    if o is None:
        print(f"{name:<14}  infeasible")
        continue
    r = o.report
    print(f"{name:<14}{o.plan.m:>6}{o.plan.n:>6}{r.upsilon:>12.6g}{r.total_delay_s:>10.4g}{r.total_energy_j:>10.4g}")

# %% [markdown]
# First-round batch sizes of each stage (server, then one per device).

# %%
p = best.plan
print("pre-training:", p.d_batch[0] if p.m else "none")
print("fine-tuning:", p.b_batch[:, 0] if p.n else "none")
