"""Search over round counts, integer rounding, baselines and sweeps."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .bound import convergence_bound
from .config_model import EvaluationReport, Plan, ScenarioConfig
from .link_metrics import comm_delays, totals
from .sca_solver import SolveResult, sca_loop

SCHEMES = ("fixed_power", "fixed_clock", "fixed_batch", "pretrain_only", "finetune_only")
_FIXED = {"fixed_power": ("power",), "fixed_clock": ("clock",), "fixed_batch": ("batch",)}
TIE_RTOL = 1e-12


class NoFeasiblePlan(RuntimeError):
    pass


@dataclass
class SearchCell:
    m: int
    n: int
    solve: SolveResult | None = None
    plan: Plan | None = None
    report: EvaluationReport | None = None
    status: str = "skipped"     # feasible | infeasible | rounding_failed | empty | skipped

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"

    @property
    def upsilon(self):
        return self.report.upsilon if self.feasible else None


class PlanOutcome(NamedTuple):
    plan: Plan
    report: EvaluationReport
    cells: list
    best: SearchCell


# -- rounding ----------------------------------------------------------------------

def round_batches(cfg: ScenarioConfig, plan: Plan, max_steps: int | None = None) -> Plan | None:
    """Round batches to the nearest integer in [1, max]; repair budget violations greedily.

    Each repair step decrements one batch entry.  When some single decrement
    restores feasibility, the one with the smallest bound increase is taken;
    otherwise the one with the largest violation relief per unit bound
    increase.  Returns None when the budgets cannot be met by decrements.
    """
    srv, lrn = cfg.server, cfg.learning
    K = cfg.K
    d = np.clip(np.rint(plan.d_batch), 1, srv.batch_max)
    bmax = np.array([dv.batch_max for dv in cfg.devices])
    b = np.clip(np.rint(plan.b_batch), 1, bmax[:, None]) if plan.n else plan.b_batch.copy()
    f, fh, p = plan.f_server, plan.f_device, plan.p_up
    mk = lambda: Plan(plan.m, plan.n, d, f, b, fh, p)
    rep = totals(cfg, mk())
    if rep.feasible:
        return mk()
    if any(v.constraint not in ("delay_budget", "energy_budget") for v in rep.violations):
        return None

    total = plan.m + plan.n
    cpre = lrn.gamma * lrn.rho * lrn.alpha**2 / total
    cfin = lrn.gamma * lrn.rho_hat * lrn.alpha_hat**2 * K / total
    a_pre = lrn.n_flop / srv.flops_per_cycle
    e_pre = srv.pue * a_pre * srv.power_coeff
    c_hat = np.array([dv.flops_per_cycle for dv in cfg.devices])
    a_fin = (lrn.n_flop / c_hat)[:, None]
    e_fin = (np.array([dv.pue * dv.power_coeff for dv in cfg.devices]) * lrn.n_flop / c_hat)[:, None]

    delay, energy = rep.total_delay_s, rep.total_energy_j
    tau0, e0 = cfg.budgets.tau0_s, cfg.budgets.e0_j
    viol = lambda dl, en: np.maximum(0.0, dl / tau0 - 1.0) + np.maximum(0.0, en / e0 - 1.0)
    if plan.n:
        # download + upload part of every device's round expression; unchanged by the repair
        other = np.add(*comm_delays(cfg, p))
        expr = other + b * a_fin / fh
    limit = max_steps if max_steps is not None else int(np.sum(d) + np.sum(b)) + 1
    for _ in range(limit):
        v0 = float(viol(delay, energy))
        if v0 <= 0:
            break
        us, nds, nes, stage, ii, rr_all = [], [], [], [], [], []
        if plan.m:
            j = np.flatnonzero(d > 1)
            us.append(cpre * (1.0 / (d[j] - 1) - 1.0 / d[j]))
            nds.append(delay - a_pre / f[j])
            nes.append(energy - e_pre * f[j] ** 2)
            stage.append(np.zeros(j.size, dtype=int))
            ii.append(j)
            rr_all.append(np.zeros(j.size, dtype=int))
        if plan.n:
            kk, rr = np.nonzero(b > 1)
            S = b.sum(axis=0)
            srt = np.sort(expr, axis=0)
            top1 = srt[-1]
            top2 = srt[-2] if cfg.K > 1 else np.full(plan.n, -np.inf)
            rest = np.where(expr[kk, rr] >= top1[rr], top2[rr], top1[rr])
            new_round = np.maximum(other[kk, rr] + (b[kk, rr] - 1) * a_fin[kk, 0] / fh[kk, rr], rest)
            us.append(cfin * (1.0 / (S[rr] - 1) - 1.0 / S[rr]))
            nds.append(delay - top1[rr] + new_round)
            nes.append(energy - e_fin[kk, 0] * fh[kk, rr] ** 2)
            stage.append(np.ones(kk.size, dtype=int))
            ii.append(kk)
            rr_all.append(rr)
        cu, nd, ne = np.concatenate(us), np.concatenate(nds), np.concatenate(nes)
        if cu.size == 0:
            return None
        cv = viol(nd, ne)
        fixes = np.flatnonzero(cv <= 0)
        if fixes.size:
            pick = fixes[np.argmin(cu[fixes])]
        else:
            relief = v0 - cv
            if not np.any(relief > 0):
                return None
            score = np.where(relief > 0, relief / np.maximum(cu, 1e-300), -np.inf)
            pick = int(np.argmax(score))
        st, i, r = np.concatenate(stage)[pick], np.concatenate(ii)[pick], np.concatenate(rr_all)[pick]
        if st == 0:
            d[i] -= 1
        else:
            b[i, r] -= 1
            expr[i, r] = other[i, r] + b[i, r] * a_fin[i, 0] / fh[i, r]
        delay, energy = float(nd[pick]), float(ne[pick])
    else:
        return None
    out = mk()
    return out if totals(cfg, out).feasible else None


# -- grid search -------------------------------------------------------------------------

def evaluate_cell(cfg: ScenarioConfig, m: int, n: int, fixed=(), init=None) -> SearchCell:
    if m + n == 0:
        return SearchCell(m, n, status="empty")
    res = sca_loop(cfg, m, n, init=init, fixed=fixed)
    if not res.ok:
        return SearchCell(m, n, res, status="infeasible")
    plan = round_batches(cfg, res.plan())
    if plan is None:
        return SearchCell(m, n, res, status="rounding_failed")
    return SearchCell(m, n, res, plan, totals(cfg, plan), "feasible")


def solve_grid(cfg: ScenarioConfig, fixed=(), m_values=None, n_values=None, warm: bool = True) -> list:
    """Every (m, n) cell in row-major order; each row warm-starts from its left neighbour."""
    ms = cfg.search.m_values() if m_values is None else list(m_values)
    ns = cfg.search.n_values() if n_values is None else list(n_values)
    cells = []
    for m in ms:
        prev = None
        for n in ns:
            cell = evaluate_cell(cfg, m, n, fixed, init=prev if warm else None)
            cells.append(cell)
            prev = cell.solve if cell.solve is not None and cell.solve.ok else None
    return cells


def select_best(cells) -> SearchCell | None:
    """Minimum bound; ties (relative 1e-12) go to lower energy, then delay, then fewer rounds."""
    ok = [c for c in cells if c.feasible]
    if not ok:
        return None
    top = min(c.upsilon for c in ok)
    tied = [c for c in ok if c.upsilon <= top + TIE_RTOL * abs(top)]
    return min(tied, key=lambda c: (c.report.total_energy_j, c.report.total_delay_s, c.m + c.n, c.m))


def rescore(cfg: ScenarioConfig, cells) -> list:
    """Recompute bound values under ``cfg.learning`` without re-solving.

    Valid when only the shift or loss-gap constants changed: neither affects
    the inner solutions or the rounding.
    """
    out = []
    for c in cells:
        if c.feasible:
            ups = convergence_bound(cfg.learning, cfg.K, c.plan.d_batch, c.plan.b_batch).upsilon
            c = dataclasses.replace(c, report=dataclasses.replace(c.report, upsilon=ups))
        out.append(c)
    return out


def _outcome(cells) -> PlanOutcome:
    best = select_best(cells)
    if best is None:
        raise NoFeasiblePlan("no feasible cell in the search space")
    return PlanOutcome(best.plan, best.report, cells, best)


def plan_optimal(cfg: ScenarioConfig, cells=None, polish_from=()) -> PlanOutcome:
    """Best rounded plan over the whole (m, n) search space.

    ``polish_from`` takes outcomes of restricted schemes.  SCA is restarted
    from each of their plans without the restriction, and those plans stay in
    the candidate pool: each is feasible here too, so the result is never
    worse than any of them.
    """
    cells = solve_grid(cfg) if cells is None else list(cells)
    extra = []
    for o in polish_from:
        b = o.best
        extra.append(evaluate_cell(cfg, b.m, b.n, init=b.plan))
        extra.append(b)
    best = select_best(cells + extra)
    if best is None:
        raise NoFeasiblePlan("no feasible cell in the search space")
    return PlanOutcome(best.plan, best.report, cells, best)


def scheme_grid(cfg: ScenarioConfig, scheme: str) -> list:
    if scheme == "proposed":
        return solve_grid(cfg)
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme '{scheme}', expected one of {('proposed',) + SCHEMES}")
    if scheme == "pretrain_only":
        return solve_grid(cfg, n_values=[0])
    if scheme == "finetune_only":
        return solve_grid(cfg, m_values=[0])
    return solve_grid(cfg, fixed=_FIXED[scheme])


def plan_baseline(cfg: ScenarioConfig, scheme: str, cells=None) -> PlanOutcome:
    return _outcome(scheme_grid(cfg, scheme) if cells is None else cells)


# -- sweeps -------------------------------------------------------------------------------

SWEEP_PARAMS = ("tau0_s", "e0_j", "wdist")
SWEEP_COLUMNS = ("param", "value", "scheme", "m", "n", "upsilon", "delay", "energy",
                 "pretrain_delay", "pretrain_energy", "finetune_delay", "finetune_energy")


def _with_param(cfg, param, value):
    if param == "wdist":
        return cfg.with_learning(wdist=float(value))
    return cfg.with_budgets(**{param: float(value)})


def sweep(cfg: ScenarioConfig, param: str, values, schemes=("proposed",)) -> list[dict]:
    """One row per (value, scheme).  Infeasible points carry an empty bound and continue."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}, got '{param}'")
    values = [float(v) for v in values]
    if len(values) < 2 or any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError("sweep grid must be strictly increasing with at least 2 values")
    rows = []
    cached = {}
    for v in values:
        cv = _with_param(cfg, param, v)
        for s in schemes:
            if param == "wdist":
                # inner solutions do not depend on the shift constant: solve once, rescore
                if s not in cached:
                    cached[s] = scheme_grid(cv, s)
                cells = rescore(cv, cached[s])
            else:
                cells = scheme_grid(cv, s)
            best = select_best(cells)
            row = {"param": param, "value": v, "scheme": s}
            if best is None:
                row.update({k: "" for k in SWEEP_COLUMNS[3:]})
            else:
                r = best.report
                row.update(m=best.m, n=best.n, upsilon=r.upsilon, delay=r.total_delay_s,
                           energy=r.total_energy_j, pretrain_delay=r.pretrain_delay_s,
                           pretrain_energy=r.pretrain_energy_j, finetune_delay=r.finetune_delay_s,
                           finetune_energy=r.finetune_energy_j)
            rows.append(row)
    return rows


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_sweep_csv(rows, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in SWEEP_COLUMNS])


GRID_COLUMNS = ("m", "n", "upsilon", "delay", "energy", "status")


def write_grid_csv(cells, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GRID_COLUMNS)
        for c in cells:
            if c.feasible:
                r = c.report
                w.writerow([c.m, c.n, _fmt(r.upsilon), _fmt(r.total_delay_s), _fmt(r.total_energy_j), c.status])
            else:
                w.writerow([c.m, c.n, "", "", "", c.status])
