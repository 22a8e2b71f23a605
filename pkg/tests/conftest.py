import copy
import json
from pathlib import Path

import numpy as np
import pytest

from edgeplan.config_model import scenario_from_dict

DATA = Path(__file__).resolve().parents[1] / "src" / "edgeplan" / "data"


def mnist_dict():
    return json.loads((DATA / "mnist.json").read_text())


def worked_dict(K=3):
    """Symmetric version of the MNIST setup: every device has power coefficient 1.09e-27."""
    d = mnist_dict()
    dev = copy.deepcopy(d["devices"][0])
    d["devices"] = [dict(dev, id=k) for k in range(K)]
    return d


def worked_cfg(K=3, **learning):
    d = worked_dict(K)
    d["learning"].update(learning)
    return scenario_from_dict(d)


@pytest.fixture
def worked():
    return worked_cfg()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_plan(rng, cfg, m=None, n=None, integer=True):
    from edgeplan.config_model import Plan

    K = cfg.K
    m = int(rng.integers(0, 5)) if m is None else m
    n = int(rng.integers(0, 5)) if n is None else n
    bmax = np.array([d.batch_max for d in cfg.devices])[:, None]
    fmax = np.array([d.f_max_hz for d in cfg.devices])[:, None]
    pmax = np.array([d.p_max_w for d in cfg.devices])[:, None]
    d = rng.uniform(1, cfg.server.batch_max, m)
    b = rng.uniform(1, 1, (K, n)) * rng.uniform(1, bmax, (K, n))
    if integer:
        d, b = np.round(d), np.round(b)
    return Plan(m, n, d, rng.uniform(0.05, 1, m) * cfg.server.f_max_hz, b,
                rng.uniform(0.05, 1, (K, n)) * fmax, rng.uniform(0.01, 1, (K, n)) * pmax)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
