"""Command line entry point: ``edgeplan <command> ...``.

Exit status is 0 on success, 1 for bad input (files, fields, flags) and 2
when the requested problem has no feasible plan.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import planner, simulator
from .bound import load_samples, wasserstein
from .config_model import (
    ConfigError,
    Plan,
    ScenarioConfig,
    builtin_scenario,
    dumps,
    load_plan,
    load_scenario,
    report_to_dict,
    save_plan,
    save_report,
)
from .link_metrics import totals

log = logging.getLogger("edgeplan")

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2


class InputError(Exception):
    pass


def _scenario(args) -> ScenarioConfig:
    src = args.scenario
    if src is None:
        raise InputError("--scenario is required")
    path = Path(src)
    if path.exists():
        cfg = load_scenario(path)
    else:
        try:
            cfg = builtin_scenario(src)
        except (FileNotFoundError, ConfigError):
            raise InputError(f"scenario '{src}': no such file or built-in scenario") from None
    if getattr(args, "epsilon", None) is not None:
        cfg = cfg.with_solver(epsilon=args.epsilon)
    changes = {}
    if getattr(args, "m_max", None) is not None:
        changes["m_max"] = args.m_max
        changes["m_min"] = min(cfg.search.m_min, args.m_max)
    if getattr(args, "n_max", None) is not None:
        changes["n_max"] = args.n_max
        changes["n_min"] = min(cfg.search.n_min, args.n_max)
    return cfg.with_search(**changes) if changes else cfg


def _out_dir(args, default="out") -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_report(rep, plan: Plan | None = None, stream=None):
    stream = stream or sys.stdout
    if plan is not None:
        print(f"rounds        M={plan.m} N={plan.n}", file=stream)
    ups = "n/a" if rep.upsilon is None else f"{rep.upsilon:.10g}"
    print(f"upsilon       {ups}", file=stream)
    print(f"delay [s]     {rep.total_delay_s:.10g}  (pre {rep.pretrain_delay_s:.6g}, fine {rep.finetune_delay_s:.6g})",
          file=stream)
    print(f"energy [J]    {rep.total_energy_j:.10g}  (pre {rep.pretrain_energy_j:.6g}, fine {rep.finetune_energy_j:.6g})",
          file=stream)
    print(f"feasible      {rep.feasible}", file=stream)
    for v in rep.violations:
        print(f"  violated    {v.constraint} by {v.excess:.6g}", file=stream)


# -- commands ------------------------------------------------------------------------

def cmd_plan(args) -> int:
    cfg = _scenario(args)
    out = _out_dir(args)
    cells = planner.solve_grid(cfg)
    planner.write_grid_csv(cells, out / "grid.csv")
    try:
        res = planner.plan_optimal(cfg, cells)
    except planner.NoFeasiblePlan:
        print("infeasible: no (M, N) cell admits a plan within the budgets", file=sys.stderr)
        return EXIT_INFEASIBLE
    save_plan(res.plan, out / "plan.json")
    save_report(res.report, out / "report.json", res.plan)
    _print_report(res.report, res.plan)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _scenario(args)
    if not args.plan:
        raise InputError("--plan is required")
    plan = load_plan(args.plan, cfg.K)
    rep = totals(cfg, plan)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        save_report(rep, args.out, plan)
    _print_report(rep, plan)
    return EXIT_OK if rep.feasible else EXIT_INFEASIBLE


def _baseline_table(cfg, out: Path | None) -> int:
    rows, outcomes = [], {}
    for scheme in planner.SCHEMES:
        try:
            outcomes[scheme] = planner.plan_baseline(cfg, scheme)
        except planner.NoFeasiblePlan:
            outcomes[scheme] = None
    try:
        proposed = planner.plan_optimal(cfg, polish_from=[o for o in outcomes.values() if o is not None])
    except planner.NoFeasiblePlan:
        proposed = None
    print(f"{'scheme':<14} {'M':>6} {'N':>6} {'upsilon':>14} {'delay':>12} {'energy':>12}")
    for name, o in (("proposed", proposed), *outcomes.items()):
        if o is None:
            print(f"{name:<14} {'-':>6} {'-':>6} {'infeasible':>14} {'-':>12} {'-':>12}")
            rows.append({"scheme": name, "feasible": False})
            continue
        r = o.report
        print(f"{name:<14} {o.plan.m:>6} {o.plan.n:>6} {r.upsilon:>14.8g} {r.total_delay_s:>12.6g} "
              f"{r.total_energy_j:>12.6g}")
        rows.append({"scheme": name, "feasible": True, "m": o.plan.m, "n": o.plan.n, **report_to_dict(r)})
    if out is not None:
        (out / "baselines.json").write_text(dumps(rows))
    return EXIT_OK if proposed is not None else EXIT_INFEASIBLE


def cmd_baseline(args) -> int:
    cfg = _scenario(args)
    scheme = args.scheme or "all"
    out = _out_dir(args) if args.out else None
    if scheme == "all":
        return _baseline_table(cfg, out)
    if scheme != "proposed" and scheme not in planner.SCHEMES:
        raise InputError(f"--scheme: unknown scheme '{scheme}'")
    try:
        res = planner.plan_baseline(cfg, scheme) if scheme != "proposed" else planner.plan_optimal(cfg)
    except planner.NoFeasiblePlan:
        print(f"infeasible: scheme '{scheme}' has no feasible plan", file=sys.stderr)
        return EXIT_INFEASIBLE
    if out is not None:
        save_plan(res.plan, out / f"plan_{scheme}.json")
        save_report(res.report, out / f"report_{scheme}.json", res.plan)
    _print_report(res.report, res.plan)
    return EXIT_OK


def _parse_grid(text: str | None):
    if not text:
        raise InputError("--sweep-grid is required (comma-separated values or start:stop:count)")
    try:
        if ":" in text:
            a, b, k = text.split(":")
            return list(np.linspace(float(a), float(b), int(k)))
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"--sweep-grid: cannot parse '{text}'") from None


def cmd_sweep(args) -> int:
    cfg = _scenario(args)
    if not args.sweep_param:
        raise InputError("--sweep-param is required")
    grid = _parse_grid(args.sweep_grid)
    schemes = tuple(s.strip() for s in (args.scheme or "proposed").split(","))
    try:
        rows = planner.sweep(cfg, args.sweep_param, grid, schemes)
    except ValueError as e:
        raise InputError(str(e)) from None
    path = Path(args.out or "sweep.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    planner.write_sweep_csv(rows, path)
    for r in rows:
        ups = r["upsilon"]
        print(f"{r['param']}={r['value']:<12.6g} {r['scheme']:<14} "
              f"{'infeasible' if ups in ('', None) else f'{ups:.8g}'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _scenario(args)
    lrn = cfg.learning
    if args.plan:
        plan = load_plan(args.plan, cfg.K)
    else:
        plan = Plan.uniform(10, 10, cfg.K, d=cfg.server.batch_max, f=cfg.server.f_max_hz,
                            b=[d.batch_max for d in cfg.devices], fh=[d.f_max_hz for d in cfg.devices],
                            p=[min(d.p_ave_w, d.p_max_w) for d in cfg.devices])
    dim = lrn.model_dim or 4
    rng = np.random.default_rng(args.seed)
    # optima placed so the fine-tuning loss at the pre-training optimum equals wdist
    task = simulator.random_task(rng, dim=dim, gamma=lrn.gamma, rho=lrn.rho, rho_hat=lrn.rho_hat,
                                 alpha=lrn.alpha, alpha_hat=lrn.alpha_hat,
                                 shift=float(np.sqrt(2 * lrn.wdist / lrn.rho_hat)))
    n_seeds = args.seeds
    traces = simulator.monte_carlo(task, plan, range(args.seed, args.seed + n_seeds))
    ups = simulator.bound_for(task, plan)
    try:
        rep = simulator.check_lemma_inequalities(traces, task, plan, ups)
    except ValueError as e:
        raise InputError(str(e)) from None
    out = _out_dir(args)
    simulator.write_trace_csv(traces[0], out / "trace.csv")
    summary = {"seeds": n_seeds, "upsilon": ups,
               "checks": [{"name": c.name, "lhs": c.lhs, "rhs": c.rhs, "stderr": c.stderr, "holds": c.holds}
                          for c in rep.checks]}
    (out / "lemmas.json").write_text(dumps(summary))
    for c in rep.checks:
        print(f"{c.name:<18} lhs {c.lhs:.8g}  rhs {c.rhs:.8g}  se {c.stderr:.3g}  {'ok' if c.holds else 'FAIL'}")
    return EXIT_OK


def cmd_wasserstein(args) -> int:
    if len(args.files) != 2:
        raise InputError("wasserstein needs exactly two sample files")
    try:
        a, b = (load_samples(f) for f in args.files)
    except OSError as e:
        raise InputError(str(e)) from None
    try:
        value = wasserstein(a, b)
    except ValueError as e:
        raise InputError(str(e)) from None
    print(f"{value:.17g}")
    return EXIT_OK


COMMANDS = {"plan": cmd_plan, "evaluate": cmd_evaluate, "baseline": cmd_baseline,
            "sweep": cmd_sweep, "simulate": cmd_simulate, "wasserstein": cmd_wasserstein}


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="edgeplan", description="Round and resource planner for two-stage edge learning.")
    top.add_argument("-v", "--verbose", action="store_true")
    sub = top.add_subparsers(dest="command", required=True)

    def common(p, solver=True):
        p.add_argument("--scenario", help="scenario JSON file or built-in name (mnist, cinic_cifar)")
        p.add_argument("--out", help="output directory or file")
        if solver:
            p.add_argument("--epsilon", type=float, help="SCA relative stopping tolerance")
            p.add_argument("--m-max", type=int, help="override the largest pre-training round count")
            p.add_argument("--n-max", type=int, help="override the largest fine-tuning round count")

    common(sub.add_parser("plan", help="search all (M, N) cells and write the best plan"))
    p = sub.add_parser("evaluate", help="delay, energy and bound of a given plan")
    common(p, solver=False)
    p.add_argument("--plan", help="plan JSON file")
    p = sub.add_parser("baseline", help="run a restricted scheme, or 'all' for a comparison table")
    common(p)
    p.add_argument("--scheme", help="one of: all, proposed, " + ", ".join(planner.SCHEMES))
    p = sub.add_parser("sweep", help="re-plan over a grid of one budget or the shift distance")
    common(p)
    p.add_argument("--sweep-param", choices=planner.SWEEP_PARAMS)
    p.add_argument("--sweep-grid", help="comma-separated values or start:stop:count")
    p.add_argument("--scheme", help="comma-separated schemes (default: proposed)")
    p = sub.add_parser("simulate", help="synthetic quadratic SGD against the bound")
    common(p, solver=False)
    p.add_argument("--plan", help="plan JSON file (default: 10 + 10 rounds at full allocation)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=100, help="Monte-Carlo repetitions")
    p = sub.add_parser("wasserstein", help="empirical W1 between two sample files")
    p.add_argument("files", nargs="*")
    return top


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (InputError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":      # pragma: no cover
    sys.exit(main())
