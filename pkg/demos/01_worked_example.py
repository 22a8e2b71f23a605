# %% [markdown]
# Worked example: one pre-training round on the server, one fine-tuning round
# on three identical devices, every knob at its maximum.  Prints the link
# rates, the delay and energy ledger and the bound, then shows how the bound
# settles as the number of fine-tuning rounds grows.

# %%
import numpy as np

from edgeplan.bound import asymptotic_limit, convergence_bound
from edgeplan.config_model import LearningProfile, Plan, builtin_scenario, replace
from edgeplan.link_metrics import round_ledgers, totals, uplink_rate

cfg = builtin_scenario("mnist")
dev0 = cfg.devices[0]
cfg = replace(cfg, devices=tuple(replace(dev0, id=k) for k in range(3)))
print(f"uplink rate at 0.5 W: {uplink_rate(dev0, 0.5):.6g} bit/s")

# %%
plan = Plan.uniform(1, 1, 3, d=700, f=1.6e9, b=700, fh=3.6e8, p=0.5)
rep = totals(cfg, plan)
for r in round_ledgers(cfg, plan):
    print(r)
print(f"total delay {rep.total_delay_s:.6f} s, total energy {rep.total_energy_j:.6f} J, bound {rep.upsilon:.6g}")

# %% [markdown]
# The bound with small shift and loss-gap constants, against its N -> inf limit.

# %%
lrn = LearningProfile(gamma=0.01, rho=1.0, rho_hat=1.0, alpha=2.0, alpha_hat=2.0, rho_tilde=1.0,
                      wdist=1e-5, loss_gap=5e-5, n_flop=1e6, model_bits=2e5)
lim = asymptotic_limit(lrn, 3, 300.0)
for n in (10, 100, 1000, 10_000):
    ups = convergence_bound(lrn, 3, np.full(2, 50.0), np.full((3, n), 100.0)).upsilon
    print(f"N={n:>6}  bound {ups:.6g}  relative gap to limit {abs(ups - lim) / lim:.3g}")
