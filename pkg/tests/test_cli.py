import csv
import json
import subprocess
import sys

import pytest

from conftest import worked_cfg
from edgeplan.cli import EXIT_INFEASIBLE, EXIT_INPUT, EXIT_OK, main
from edgeplan.config_model import Plan, load_plan, save_plan, save_scenario
from edgeplan.link_metrics import totals

TOTAL_DELAY = 2.593231711831037827629       # see test_link_metrics
TOTAL_ENERGY = 28.53482166738659338318


@pytest.fixture
def scen(tmp_path):
    cfg = worked_cfg().with_search(m_max=4, n_max=4, m_step=2, n_step=2)
    full = totals(cfg, Plan.uniform(2, 2, 3, d=700, f=1.6e9, b=700, fh=3.6e8, p=0.5))
    cfg = cfg.with_budgets(tau0_s=full.total_delay_s, e0_j=full.total_energy_j)
    path = tmp_path / "scen.json"
    save_scenario(cfg, path)
    return path


def test_plan_writes_outputs(scen, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["plan", "--scenario", str(scen), "--out", str(out)]) == EXIT_OK
    assert {p.name for p in out.iterdir()} == {"grid.csv", "plan.json", "report.json"}
    rep = json.loads((out / "report.json").read_text())["report"]
    assert rep["feasible"] is True
    assert "upsilon" in capsys.readouterr().out
    rows = list(csv.DictReader((out / "grid.csv").open()))
    assert len(rows) == 9


def test_plan_infeasible_exit(scen, tmp_path, capsys):
    cfg_path = tmp_path / "tiny.json"
    d = json.loads(scen.read_text())
    d["budgets"]["tau0_s"] = 1e-4
    cfg_path.write_text(json.dumps(d))
    assert main(["plan", "--scenario", str(cfg_path), "--out", str(tmp_path / "o")]) == EXIT_INFEASIBLE
    assert "infeasible" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["plan", "--scenario", "/nonexistent/file.json"],
    ["plan"],
    ["evaluate", "--scenario", "mnist"],
    ["frobnicate"],
    ["wasserstein", "one_file"],
    ["sweep", "--scenario", "mnist", "--sweep-param", "wdist", "--sweep-grid", "a,b"],
])
def test_input_errors(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_INPUT


def test_malformed_scenario(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{ not json")
    assert main(["plan", "--scenario", str(p)]) == EXIT_INPUT


def test_evaluate_reproduces_worked_totals(tmp_path, capsys):
    cfg_path, plan_path = tmp_path / "w.json", tmp_path / "p.json"
    save_scenario(worked_cfg(), cfg_path)
    save_plan(Plan.uniform(1, 1, 3, d=700, f=1.6e9, b=700, fh=3.6e8, p=0.5), plan_path)
    out = tmp_path / "r.json"
    assert main(["evaluate", "--scenario", str(cfg_path), "--plan", str(plan_path), "--out", str(out)]) == EXIT_OK
    rep = json.loads(out.read_text())["report"]
    assert rep["total_delay_s"] == pytest.approx(TOTAL_DELAY, rel=1e-14)
    assert rep["total_energy_j"] == pytest.approx(TOTAL_ENERGY, rel=1e-14)
    d = json.loads(cfg_path.read_text())
    d["budgets"]["e0_j"] = 1.0
    cfg_path.write_text(json.dumps(d))
    assert main(["evaluate", "--scenario", str(cfg_path), "--plan", str(plan_path)]) == EXIT_INFEASIBLE
    assert "energy_budget" in capsys.readouterr().out


def test_baseline_table(scen, tmp_path, capsys):
    assert main(["baseline", "--scenario", str(scen), "--out", str(tmp_path / "b")]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 7
    rows = json.loads((tmp_path / "b" / "baselines.json").read_text())
    assert [r["scheme"] for r in rows][0] == "proposed" and len(rows) == 6
    ups = [r["upsilon"] for r in rows if r["feasible"]]
    assert rows[0]["upsilon"] == min(ups)


def test_single_baseline(scen, tmp_path):
    out = tmp_path / "b"
    assert main(["baseline", "--scenario", str(scen), "--scheme", "fixed_power", "--out", str(out)]) == EXIT_OK
    plan = load_plan(out / "plan_fixed_power.json", K=3)
    assert (plan.p_up == 0.5).all()
    assert main(["baseline", "--scenario", str(scen), "--scheme", "bogus"]) == EXIT_INPUT


def test_sweep_two_points(scen, tmp_path, capsys):
    out = tmp_path / "s.csv"
    argv = ["sweep", "--scenario", str(scen), "--sweep-param", "wdist", "--sweep-grid", "0.1,0.2", "--out", str(out)]
    assert main(argv) == EXIT_OK
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 2 and float(rows[0]["upsilon"]) < float(rows[1]["upsilon"])
    argv[-3] = "0:0.2:3"
    assert main(argv) == EXIT_OK
    assert len(list(csv.DictReader(out.open()))) == 3


def test_simulate(scen, tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--scenario", str(scen), "--seeds", "40", "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "lemmas.json").read_text())
    assert summary["seeds"] == 40 and all(c["holds"] for c in summary["checks"])
    assert (out / "trace.csv").read_text().startswith("stage,round,grad_norm_sq,loss")
    assert main(["simulate", "--scenario", str(scen), "--seeds", "5", "--out", str(out)]) == EXIT_INPUT


def test_wasserstein(tmp_path, capsys):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    a.write_text("0\n2\n")
    b.write_text("1\n3\n")
    assert main(["wasserstein", str(a), str(b)]) == EXIT_OK
    assert float(capsys.readouterr().out) == 1.0
    assert main(["wasserstein", str(a), str(a)]) == EXIT_OK
    assert float(capsys.readouterr().out) == 0.0
    assert main(["wasserstein", str(a), str(tmp_path / "missing.txt")]) == EXIT_INPUT


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "edgeplan", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("plan", "evaluate", "baseline", "sweep", "simulate", "wasserstein"):
        assert cmd in res.stdout
