"""Typed configuration and decision records for the two-stage edge learning planner.

Everything here is immutable after construction.  Scenario, plan and report
files are JSON with the field names used by the dataclasses below; floats are
written with 17 significant digits so a save/load cycle is bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np


class ConfigError(ValueError):
    """Raised for unparsable files or values that break a record invariant."""


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.size == 0 and ndim == 1:
        arr = arr.reshape(0)
    if arr.ndim != ndim:
        raise ConfigError(f"{name}: expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _gain(value, name: str):
    if isinstance(value, (list, tuple, np.ndarray)):
        arr = tuple(float(v) for v in value)
        _require(len(arr) > 0, f"{name}: per-round gain list is empty")
        _require(all(v >= 0 and math.isfinite(v) for v in arr), f"{name}: gains must be finite and >= 0")
        return arr
    v = float(value)
    _require(v >= 0 and math.isfinite(v), f"{name}: gain must be finite and >= 0, got {v}")
    return v


@dataclass(frozen=True)
class DeviceProfile:
    """One edge device.  ``g_up``/``g_down`` are scalars or per-round tuples."""

    id: int
    g_up: float | tuple
    g_down: float | tuple
    bw_up_hz: float
    noise_up_psd: float
    noise_down_psd: float
    p_ave_w: float
    p_max_w: float
    f_max_hz: float
    pue: float
    power_coeff: float
    batch_max: float
    flops_per_cycle: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "g_up", _gain(self.g_up, f"device {self.id} g_up"))
        object.__setattr__(self, "g_down", _gain(self.g_down, f"device {self.id} g_down"))
        for name in ("bw_up_hz", "noise_up_psd", "noise_down_psd", "p_ave_w", "p_max_w",
                     "f_max_hz", "pue", "power_coeff", "batch_max", "flops_per_cycle"):
            v = float(getattr(self, name))
            _require(math.isfinite(v) and v > 0, f"device {self.id} {name}: must be > 0, got {v}")
            object.__setattr__(self, name, v)
        _require(self.p_ave_w <= self.p_max_w,
                 f"device {self.id} p_ave_w: must not exceed p_max_w ({self.p_ave_w} > {self.p_max_w})")
        _require(self.batch_max >= 1, f"device {self.id} batch_max: must be >= 1")

    def gain_up(self, n: int | None = None) -> float:
        return _pick(self.g_up, n)

    def gain_down(self, n: int | None = None) -> float:
        return _pick(self.g_down, n)


def _pick(g, n):
    if isinstance(g, tuple):
        if n is None:
            raise ValueError("per-round gains need a round index")
        if n >= len(g):
            raise ConfigError(f"per-round gain list has {len(g)} entries, round {n} requested")
        return g[n]
    return g


@dataclass(frozen=True)
class ServerProfile:
    f_max_hz: float
    pue: float
    power_coeff: float
    tx_power_w: float
    bw_down_hz: float
    batch_max: float
    flops_per_cycle: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            _require(math.isfinite(v) and v > 0, f"server {f.name}: must be > 0, got {v}")
            object.__setattr__(self, f.name, v)
        _require(self.batch_max >= 1, "server batch_max: must be >= 1")


@dataclass(frozen=True)
class LearningProfile:
    """Learning constants entering the convergence bound."""

    gamma: float
    rho: float
    rho_hat: float
    alpha: float
    alpha_hat: float
    rho_tilde: float
    wdist: float
    loss_gap: float
    n_flop: float
    model_bits: float
    model_dim: int | None = None

    def __post_init__(self):
        for f in fields(self):
            if f.name == "model_dim":
                continue
            v = float(getattr(self, f.name))
            _require(math.isfinite(v) and v >= 0, f"learning {f.name}: must be finite and >= 0, got {v}")
            object.__setattr__(self, f.name, v)
        for name in ("gamma", "n_flop", "model_bits"):
            _require(getattr(self, name) > 0, f"learning {name}: must be > 0")
        for name in ("rho", "rho_hat"):
            r = getattr(self, name)
            _require(r == 0 or self.gamma <= 1.0 / r,
                     f"learning gamma: {self.gamma} exceeds 1/{name} = {1.0 / r if r else math.inf}")
        if self.model_dim is not None:
            object.__setattr__(self, "model_dim", int(self.model_dim))

    @property
    def shift(self) -> float:
        """Transfer penalty rho_tilde * W."""
        return self.rho_tilde * self.wdist


@dataclass(frozen=True)
class Budgets:
    tau0_s: float
    e0_j: float

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            _require(v > 0, f"budgets {f.name}: must be > 0, got {v}")
            object.__setattr__(self, f.name, v)


@dataclass(frozen=True)
class SearchSpace:
    """Round-count search ranges.  ``m_step``/``n_step`` thin the grid (both ends kept)."""

    m_max: int
    n_max: int
    m_min: int = 0
    n_min: int = 0
    m_step: int = 1
    n_step: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            _require(float(v) == int(v), f"search {f.name}: must be an integer")
            object.__setattr__(self, f.name, int(v))
        _require(0 <= self.m_min <= self.m_max, "search m_min/m_max: need 0 <= m_min <= m_max")
        _require(0 <= self.n_min <= self.n_max, "search n_min/n_max: need 0 <= n_min <= n_max")
        _require(self.m_max + self.n_max >= 1, "search m_max/n_max: need m_max + n_max >= 1")
        _require(self.m_step >= 1 and self.n_step >= 1, "search m_step/n_step: must be >= 1")

    def m_values(self) -> list[int]:
        return _stepped(self.m_min, self.m_max, self.m_step)

    def n_values(self) -> list[int]:
        return _stepped(self.n_min, self.n_max, self.n_step)


def _stepped(lo, hi, step):
    vals = list(range(lo, hi + 1, step))
    if vals[-1] != hi:
        vals.append(hi)
    return vals


@dataclass(frozen=True)
class SolverSettings:
    epsilon: float = 1e-6
    max_sca_iters: int = 50
    tol_kkt: float = 1e-8
    gap_tol: float = 1e-8
    max_newton_iters: int = 200

    def __post_init__(self):
        _require(self.epsilon >= 0, "solver epsilon: must be >= 0")
        _require(int(self.max_sca_iters) >= 1, "solver max_sca_iters: must be >= 1")
        object.__setattr__(self, "max_sca_iters", int(self.max_sca_iters))
        object.__setattr__(self, "max_newton_iters", int(self.max_newton_iters))
        _require(self.tol_kkt > 0 and self.gap_tol > 0, "solver tolerances: must be > 0")


@dataclass(frozen=True)
class ScenarioConfig:
    devices: tuple[DeviceProfile, ...]
    server: ServerProfile
    learning: LearningProfile
    budgets: Budgets
    search: SearchSpace
    solver: SolverSettings = field(default_factory=SolverSettings)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        _require(len(self.devices) >= 1, "devices: at least one device is required")
        for dev in self.devices:
            for g, label in ((dev.g_up, "g_up"), (dev.g_down, "g_down")):
                if isinstance(g, tuple):
                    _require(len(g) >= self.search.n_max,
                             f"device {dev.id} {label}: per-round list shorter than n_max={self.search.n_max}")

    @property
    def K(self) -> int:
        return len(self.devices)

    def with_learning(self, **changes) -> "ScenarioConfig":
        return replace(self, learning=replace(self.learning, **changes))

    def with_budgets(self, **changes) -> "ScenarioConfig":
        return replace(self, budgets=replace(self.budgets, **changes))

    def with_search(self, **changes) -> "ScenarioConfig":
        return replace(self, search=replace(self.search, **changes))

    def with_solver(self, **changes) -> "ScenarioConfig":
        return replace(self, solver=replace(self.solver, **changes))


@dataclass(frozen=True)
class Plan:
    """A complete decision: round counts plus per-round allocations.

    ``b_batch``, ``f_device`` and ``p_up`` are K x N arrays.
    """

    m: int
    n: int
    d_batch: np.ndarray
    f_server: np.ndarray
    b_batch: np.ndarray
    f_device: np.ndarray
    p_up: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", int(self.m))
        object.__setattr__(self, "n", int(self.n))
        _require(self.m >= 0 and self.n >= 0, "plan m/n: must be >= 0")
        object.__setattr__(self, "d_batch", _frozen_array(self.d_batch, 1, "d_batch"))
        object.__setattr__(self, "f_server", _frozen_array(self.f_server, 1, "f_server"))
        for name in ("b_batch", "f_device", "p_up"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim == 1 and arr.size == 0:
                arr = arr.reshape(0, 0)
            _require(arr.ndim == 2, f"{name}: expected K x N array, got shape {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def K(self) -> int:
        return self.b_batch.shape[0]

    def check_shapes(self, K: int) -> None:
        msgs = []
        for name in ("d_batch", "f_server"):
            if getattr(self, name).shape != (self.m,):
                msgs.append(f"{name} has shape {getattr(self, name).shape}, expected ({self.m},)")
        for name in ("b_batch", "f_device", "p_up"):
            shape = getattr(self, name).shape
            if self.n == 0 and shape[1] == 0:
                continue
            if shape != (K, self.n):
                msgs.append(f"{name} has shape {shape}, expected ({K}, {self.n})")
        if msgs:
            raise ValueError("plan shape mismatch: " + "; ".join(msgs))

    @classmethod
    def uniform(cls, m, n, K, d, f, b, fh, p) -> "Plan":
        """Same allocation in every round; b, fh, p may be scalars or length-K."""
        col = lambda v: np.broadcast_to(np.asarray(v, dtype=float).reshape(-1, 1), (K, n))
        return cls(m, n, np.full(m, float(d)), np.full(m, float(f)), col(b), col(fh), col(p))


@dataclass(frozen=True)
class Violation:
    constraint: str
    excess: float


@dataclass(frozen=True)
class EvaluationReport:
    upsilon: float | None
    total_delay_s: float
    total_energy_j: float
    pretrain_delay_s: float
    finetune_delay_s: float
    pretrain_energy_j: float
    finetune_energy_j: float
    per_round_delay: dict
    per_round_energy: dict
    feasible: bool
    violations: tuple[Violation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "violations", tuple(self.violations))
        if self.feasible == bool(self.violations):
            raise ValueError("feasible must hold exactly when there are no violations")


# -- validation ----------------------------------------------------------------

def validate_plan(cfg: ScenarioConfig, plan: Plan) -> list[Violation]:
    """Box and average-power checks.  Returns one entry per violated constraint."""
    plan.check_shapes(cfg.K)
    out: list[Violation] = []

    def add(name, excess):
        if excess > 0:
            out.append(Violation(name, float(excess)))

    srv = cfg.server
    if plan.m:
        add("pretrain_batch_min", np.max(1.0 - plan.d_batch))
        add("pretrain_batch_max", np.max(plan.d_batch - srv.batch_max))
        add("server_clock_min", np.max(-plan.f_server))
        add("server_clock_max", np.max(plan.f_server - srv.f_max_hz))
    if plan.n:
        for k, dev in enumerate(cfg.devices):
            b, f, p = plan.b_batch[k], plan.f_device[k], plan.p_up[k]
            add(f"device{dev.id}_batch_min", np.max(1.0 - b))
            add(f"device{dev.id}_batch_max", np.max(b - dev.batch_max))
            add(f"device{dev.id}_clock_min", np.max(-f))
            add(f"device{dev.id}_clock_max", np.max(f - dev.f_max_hz))
            add(f"device{dev.id}_power_min", np.max(-p))
            add(f"device{dev.id}_power_peak", np.max(p - dev.p_max_w))
            add(f"device{dev.id}_power_average", np.mean(p) - dev.p_ave_w)
    return out


# -- JSON I/O ------------------------------------------------------------------

def _fmt(x: Any) -> str:
    if isinstance(x, bool) or x is None:
        return json.dumps(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            return json.dumps(x)
        return "%.17g" % x
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in x.items()) + "}"
    if isinstance(x, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(v) for v in x) + "]"
    raise TypeError(f"cannot serialize {type(x).__name__}")


def dumps(obj: Any) -> str:
    """JSON text with every float at 17 significant digits."""
    return _fmt(obj) + "\n"


def _read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _rayleigh_gains(chan: dict, K: int, n_rounds: int):
    """Seeded Rayleigh fading: power gain = path_loss * |h|^2, h ~ CN(0, 1)."""
    rng = np.random.default_rng(int(chan.get("seed", 0)))
    loss = float(chan.get("path_loss", 1e-5))
    per_round = bool(chan.get("per_round", False))
    size = (K, 2, max(n_rounds, 1)) if per_round else (K, 2)
    g = loss * rng.exponential(1.0, size=size)
    if per_round:
        return [(tuple(g[k, 0]), tuple(g[k, 1])) for k in range(K)]
    return [(float(g[k, 0]), float(g[k, 1])) for k in range(K)]


def scenario_from_dict(data: dict) -> ScenarioConfig:
    data = dict(data)
    for key in ("devices", "server", "learning", "budgets", "search"):
        if key not in data:
            raise ConfigError(f"scenario: missing section '{key}'")
    search = _build(SearchSpace, data["search"], "search")
    raw_devs = data["devices"]
    if not isinstance(raw_devs, list) or not raw_devs:
        raise ConfigError("devices: expected a non-empty list")
    channel = data.get("channel")
    gains = None
    if channel is not None:
        if channel.get("model", "rayleigh") != "rayleigh":
            raise ConfigError(f"channel model: unsupported '{channel.get('model')}'")
        gains = _rayleigh_gains(channel, len(raw_devs), search.n_max)
    devices = []
    for k, raw in enumerate(raw_devs):
        raw = dict(raw)
        raw.setdefault("id", k)
        if gains is not None:
            raw.setdefault("g_up", gains[k][0])
            raw.setdefault("g_down", gains[k][1])
        devices.append(_build(DeviceProfile, raw, f"device {raw['id']}"))
    solver = _build(SolverSettings, data.get("solver", {}), "solver")
    return ScenarioConfig(
        devices=tuple(devices),
        server=_build(ServerProfile, data["server"], "server"),
        learning=_build(LearningProfile, data["learning"], "learning"),
        budgets=_build(Budgets, data["budgets"], "budgets"),
        search=search,
        solver=solver,
        name=str(data.get("name", "")),
    )


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    return {
        "name": cfg.name,
        "devices": [asdict(d) for d in cfg.devices],
        "server": asdict(cfg.server),
        "learning": asdict(cfg.learning),
        "budgets": asdict(cfg.budgets),
        "search": asdict(cfg.search),
        "solver": asdict(cfg.solver),
    }


def load_scenario(path) -> ScenarioConfig:
    """Read and validate a scenario file.  Omitted optional fields take defaults."""
    try:
        return scenario_from_dict(_read_json(path))
    except ConfigError as exc:
        if str(path) in str(exc):
            raise
        raise ConfigError(f"{path}: {exc}") from exc


def save_scenario(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(dumps(scenario_to_dict(cfg)))


def builtin_scenario(name: str) -> ScenarioConfig:
    """Scenarios shipped with the package: ``mnist`` and ``cinic_cifar``."""
    return load_scenario(Path(__file__).parent / "data" / f"{name}.json")


def plan_to_dict(plan: Plan) -> dict:
    return {
        "m": plan.m, "n": plan.n,
        "d_batch": plan.d_batch.tolist(), "f_server": plan.f_server.tolist(),
        "b_batch": plan.b_batch.tolist(), "f_device": plan.f_device.tolist(),
        "p_up": plan.p_up.tolist(),
    }


def plan_from_dict(data: dict, K: int | None = None) -> Plan:
    data = dict(data)
    if "plan" in data and isinstance(data["plan"], dict):
        data = data["plan"]
    try:
        plan = _build(Plan, data, "plan")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if plan.n == 0 and K is not None and plan.b_batch.shape != (K, 0):
        empty = np.zeros((K, 0))
        plan = replace(plan, b_batch=empty, f_device=empty, p_up=empty)
    return plan


def load_plan(path, K: int | None = None) -> Plan:
    return plan_from_dict(_read_json(path), K)


def save_plan(plan: Plan, path) -> None:
    Path(path).write_text(dumps(plan_to_dict(plan)))


def report_to_dict(rep: EvaluationReport) -> dict:
    d = {f.name: getattr(rep, f.name) for f in fields(rep)}
    d["violations"] = [[v.constraint, v.excess] for v in rep.violations]
    d["per_round_delay"] = {k: list(np.asarray(v, dtype=float)) for k, v in rep.per_round_delay.items()}
    d["per_round_energy"] = {k: list(np.asarray(v, dtype=float)) for k, v in rep.per_round_energy.items()}
    return d


def save_report(rep: EvaluationReport, path, plan: Plan | None = None) -> None:
    d = report_to_dict(rep)
    if plan is not None:
        d = {"plan": plan_to_dict(plan), "report": d}
    Path(path).write_text(dumps(d))
