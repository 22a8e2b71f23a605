"""Independent checks: scalar ledger replay, brute-force grid oracle, synthetic SGD.

Nothing here calls the closed-form evaluators in ``link_metrics``; the point
is to re-derive the same numbers by a different route.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config_model import (
    Budgets,
    DeviceProfile,
    EvaluationReport,
    LearningProfile,
    Plan,
    ScenarioConfig,
    SearchSpace,
    ServerProfile,
    Violation,
    validate_plan,
)

# -- ledger replay ------------------------------------------------------------------


def _rate(bw, gain, power, noise):
    return bw * math.log2(1.0 + gain * power / (bw * noise))


def _gain(g, r):
    return g[r] if isinstance(g, tuple) else g


def replay_ledger(cfg: ScenarioConfig, plan: Plan) -> EvaluationReport:
    """Walk the plan round by round with scalar arithmetic and total everything up."""
    plan.check_shapes(cfg.K)
    srv, lrn, bits = cfg.server, cfg.learning, cfg.learning.model_bits
    pre_d, pre_e = [], []
    for j in range(plan.m):
        cycles = plan.d_batch[j] * lrn.n_flop / srv.flops_per_cycle
        f = plan.f_server[j]
        pre_d.append(cycles / f if cycles else 0.0)
        pre_e.append(srv.pue * cycles * srv.power_coeff * f * f)
    fin_d, fin_e = [], []
    for r in range(plan.n):
        worst, slowest_dl, energy = 0.0, 0.0, 0.0
        for k, dv in enumerate(cfg.devices):
            r_dn = _rate(srv.bw_down_hz, _gain(dv.g_down, r), srv.tx_power_w, dv.noise_down_psd)
            r_up = _rate(dv.bw_up_hz, _gain(dv.g_up, r), plan.p_up[k, r], dv.noise_up_psd)
            t_dl = bits / r_dn if r_dn > 0 else math.inf
            t_ul = bits / r_up if r_up > 0 else math.inf
            cycles = plan.b_batch[k, r] * lrn.n_flop / dv.flops_per_cycle
            fk = plan.f_device[k, r]
            t_cp = cycles / fk if cycles else 0.0
            worst = max(worst, t_dl + t_cp + t_ul)
            slowest_dl = max(slowest_dl, t_dl)
            energy += dv.pue * cycles * dv.power_coeff * fk * fk
            energy += plan.p_up[k, r] * t_ul if math.isfinite(t_ul) else math.inf
        energy += srv.tx_power_w * slowest_dl
        fin_d.append(worst)
        fin_e.append(energy)

    delay = math.fsum(pre_d) + math.fsum(fin_d)
    total_e = math.fsum(pre_e) + math.fsum(fin_e)
    viol = []
    if plan.m + plan.n == 0:
        viol.append(Violation("empty_plan", 1.0))
    viol += validate_plan(cfg, plan)
    if not delay <= cfg.budgets.tau0_s:
        viol.append(Violation("delay_budget", delay - cfg.budgets.tau0_s))
    if not total_e <= cfg.budgets.e0_j:
        viol.append(Violation("energy_budget", total_e - cfg.budgets.e0_j))
    ups = None
    if plan.m + plan.n and np.all(plan.d_batch >= 1) and (plan.n == 0 or np.all(plan.b_batch >= 1)):
        lam = math.fsum(1.0 / x for x in plan.d_batch)
        om = math.fsum(1.0 / plan.b_batch[:, r].sum() for r in range(plan.n))
        R, g = plan.m + plan.n, lrn.gamma
        ups = (g * (lrn.rho * lrn.alpha**2 * lam + lrn.rho_hat * lrn.alpha_hat**2 * cfg.K * om) / R
               + (2 * lrn.rho_tilde * lrn.wdist / (R * g) if plan.m else 0.0) + 2 * lrn.loss_gap / (R * g))
    return EvaluationReport(
        upsilon=ups, total_delay_s=delay, total_energy_j=total_e,
        pretrain_delay_s=math.fsum(pre_d), finetune_delay_s=math.fsum(fin_d),
        pretrain_energy_j=math.fsum(pre_e), finetune_energy_j=math.fsum(fin_e),
        per_round_delay={"pretrain": np.array(pre_d), "finetune": np.array(fin_d)},
        per_round_energy={"pretrain": np.array(pre_e), "finetune": np.array(fin_e)},
        feasible=not viol, violations=tuple(viol),
    )


# -- grid oracle -----------------------------------------------------------------------

@dataclass
class OracleResult:
    upsilon: float | None
    plan: Plan | None
    points: int

    @property
    def feasible(self) -> bool:
        return self.plan is not None


MAX_GRID_POINTS = 10_000_000


def _axis(upper, r, integer=False):
    if integer:                     # batches: 1 + (upper - 1) * i / r, i = 0..r, floored
        return np.unique(np.floor(1.0 + (upper - 1.0) * np.arange(r + 1) / r))
    return upper * np.arange(1, r + 1) / r


def grid_oracle(cfg: ScenarioConfig, m: int, n: int, resolution: int = 20,
                max_points: int = MAX_GRID_POINTS) -> OracleResult:
    """Exhaustive search over round-symmetric allocations on a uniform grid.

    Each round of a stage uses the same values.  Clocks and powers are drawn
    from ``upper * i / r`` for i = 1..r; batches from ``1 + (cap - 1) * i / r``
    for i = 0..r, floored.  Doubling ``r`` nests the previous grid, so the
    minimum can only improve.
    """
    if m + n == 0:
        raise ValueError("need m + n >= 1")
    K, r = cfg.K, int(resolution)
    if any(isinstance(d.g_up, tuple) or isinstance(d.g_down, tuple) for d in cfg.devices):
        raise ValueError("grid oracle needs round-invariant gains")
    points = (r * (r + 1)) ** (m > 0) * (r * r * (r + 1)) ** (K * (n > 0))
    if points > max_points:
        raise ValueError(f"grid would have {points} points (limit {max_points})")
    srv, lrn, bud = cfg.server, cfg.learning, cfg.budgets
    bits, R, g = lrn.model_bits, m + n, lrn.gamma

    # pre-training combos: (D, f)
    if m:
        D, F = np.meshgrid(_axis(srv.batch_max, r, True), _axis(srv.f_max_hz, r), indexing="ij")
        D, F = D.ravel(), F.ravel()
        cyc = D * lrn.n_flop / srv.flops_per_cycle
        p_delay, p_energy = m * cyc / F, m * srv.pue * cyc * srv.power_coeff * F**2
        p_noise = g * lrn.rho * lrn.alpha**2 * m / D / R
    else:
        D = F = np.zeros(1)
        p_delay = p_energy = p_noise = np.zeros(1)

    # fine-tuning combos: per device (B, fh, p), then the cartesian product over devices
    if n:
        per_dev = []
        for dv in cfg.devices:
            b, fh, p = (a.ravel() for a in np.meshgrid(_axis(dv.batch_max, r, True), _axis(dv.f_max_hz, r),
                                                         _axis(dv.p_max_w, r), indexing="ij"))
            up_rate = dv.bw_up_hz * np.log2(1.0 + dv.g_up * p / (dv.bw_up_hz * dv.noise_up_psd))
            dn_rate = srv.bw_down_hz * math.log2(1.0 + dv.g_down * srv.tx_power_w / (srv.bw_down_hz * dv.noise_down_psd))
            t_ul = bits / up_rate
            t_dl = bits / dn_rate
            cyc = b * lrn.n_flop / dv.flops_per_cycle
            per_dev.append(dict(b=b, fh=fh, p=p, expr=t_dl + cyc / fh + t_ul, t_dl=t_dl,
                                e=dv.pue * cyc * dv.power_coeff * fh**2 + p * t_ul,
                                ok=p <= dv.p_ave_w))
        shape = [len(d["b"]) for d in per_dev]
        idx = [a.ravel() for a in np.meshgrid(*[np.arange(s) for s in shape], indexing="ij")]
        expr = np.max(np.stack([d["expr"][i] for d, i in zip(per_dev, idx)]), axis=0)
        e_dev = sum(d["e"][i] for d, i in zip(per_dev, idx))
        ok = np.all(np.stack([d["ok"][i] for d, i in zip(per_dev, idx)]), axis=0)
        b_tot = sum(d["b"][i] for d, i in zip(per_dev, idx))
        dl_energy = srv.tx_power_w * max(d["t_dl"] for d in per_dev)
        f_delay = n * expr
        f_energy = n * (e_dev + dl_energy)
        f_noise = g * lrn.rho_hat * lrn.alpha_hat**2 * K * n / b_tot / R
        f_delay = np.where(ok, f_delay, np.inf)
    else:
        idx = None
        f_delay = f_energy = f_noise = np.zeros(1)

    points = p_delay.size * f_delay.size
    delay = p_delay[:, None] + f_delay[None, :]
    energy = p_energy[:, None] + f_energy[None, :]
    feas = (delay <= bud.tau0_s) & (energy <= bud.e0_j)
    if not np.any(feas):
        return OracleResult(None, None, points)
    const = (2 * lrn.rho_tilde * lrn.wdist * (m > 0) + 2 * lrn.loss_gap) / (R * g)
    ups = np.where(feas, p_noise[:, None] + f_noise[None, :], np.inf)
    i, j = np.unravel_index(int(np.argmin(ups)), ups.shape)
    if n:
        col = lambda key: np.array([[d[key][ii[j]]] * n for d, ii in zip(per_dev, idx)])
        b, fh, p = col("b"), col("fh"), col("p")
    else:
        b = fh = p = np.zeros((K, 0))
    plan = Plan(m, n, np.full(m, D[i]), np.full(m, F[i]), b, fh, p)
    return OracleResult(float(ups[i, j] + const), plan, points)


# -- synthetic SGD ----------------------------------------------------------------------

@dataclass(frozen=True)
class QuadraticTask:
    """L_pre(w) = rho/2 |w - w_pre|^2 + c_pre,  L_fine(w) = rho_hat/2 |w - w_fine|^2 + c_fine."""

    dim: int
    rho: float
    rho_hat: float
    alpha: float
    alpha_hat: float
    w_pre: np.ndarray
    w_fine: np.ndarray
    w0: np.ndarray
    gamma: float
    c_pre: float = 0.0
    c_fine: float = 0.0
    shift_margin: float = 0.1      # added on top of the exact shift when pricing it in the bound

    def __post_init__(self):
        for name in ("w_pre", "w_fine", "w0"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.shape != (self.dim,):
                raise ValueError(f"{name} must have shape ({self.dim},)")
            object.__setattr__(self, name, a)
        if self.rho <= 0 or self.rho_hat <= 0:
            raise ValueError("curvatures must be positive")
        if self.alpha < 0 or self.alpha_hat < 0 or self.shift_margin < 0:
            raise ValueError("noise constants must be >= 0")
        if not 0 < self.gamma <= min(1 / self.rho, 1 / self.rho_hat) * (1 + 1e-12):
            raise ValueError("step size must satisfy gamma <= min(1/rho, 1/rho_hat)")

    def loss_pre(self, w):
        return 0.5 * self.rho * float(np.sum((w - self.w_pre) ** 2)) + self.c_pre

    def loss_fine(self, w):
        return 0.5 * self.rho_hat * float(np.sum((w - self.w_fine) ** 2)) + self.c_fine

    def expected_shift(self, plan: Plan) -> float:
        """E[L_fine(w^M)] - E[L_pre(w^M)] from the exact Gaussian dynamics, clipped at 0."""
        a = 1.0 - self.gamma * self.rho
        mean = self.w0 - self.w_pre
        var = 0.0                                   # per coordinate
        for d in plan.d_batch:
            mean = a * mean
            var = a * a * var + self.gamma**2 * self.alpha**2 / (d * self.dim)
        w_mean = self.w_pre + mean
        e_fine = 0.5 * self.rho_hat * (float(np.sum((w_mean - self.w_fine) ** 2)) + self.dim * var) + self.c_fine
        e_pre = 0.5 * self.rho * (float(np.sum(mean**2)) + self.dim * var) + self.c_pre
        return max(0.0, e_fine - e_pre)

    def shift_term(self, plan: Plan) -> float:
        """Value used for rho_tilde * W: the exact shift plus the fixed margin."""
        return self.expected_shift(plan) + self.shift_margin

    def loss_gap(self, plan: Plan) -> float:
        """Initial loss minus the fine-tuning infimum (on fine-tune data when M = 0)."""
        start = self.loss_pre(self.w0) if plan.m else self.loss_fine(self.w0)
        return start - self.c_fine

    def learning_profile(self, plan: Plan, n_flop=1.0, model_bits=1.0) -> LearningProfile:
        return LearningProfile(gamma=self.gamma, rho=self.rho, rho_hat=self.rho_hat, alpha=self.alpha,
                               alpha_hat=self.alpha_hat, rho_tilde=1.0, wdist=self.shift_term(plan),
                               loss_gap=self.loss_gap(plan), n_flop=n_flop, model_bits=model_bits,
                               model_dim=self.dim)


@dataclass
class SgdTrace:
    seed: int
    stage: np.ndarray          # 0 = pre-training, 1 = fine-tuning
    rounds: np.ndarray
    grad_norm_sq: np.ndarray
    loss: np.ndarray
    handoff_loss_fine: float   # L_fine at the hand-off model w^M
    final_loss_fine: float

    @property
    def mean_grad_norm_sq(self) -> float:
        return float(np.mean(self.grad_norm_sq)) if self.grad_norm_sq.size else 0.0


def _rng(seed, stage, rnd, device=0):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stage, rnd, device])))


def run_synthetic_sgd(task: QuadraticTask, plan: Plan, seed: int) -> SgdTrace:
    """M noisy SGD rounds on L_pre, then N FedSGD rounds on L_fine with batch-weighted aggregation."""
    if np.any(plan.d_batch < 1) or (plan.n and np.any(plan.b_batch < 1)):
        raise ValueError("plan batches must be >= 1")
    w = task.w0.copy()
    g_, dim = task.gamma, task.dim
    stage, rounds, gn, loss = [], [], [], []
    for j in range(plan.m):
        grad = task.rho * (w - task.w_pre)
        stage.append(0), rounds.append(j), gn.append(float(grad @ grad)), loss.append(task.loss_pre(w))
        sd = task.alpha / math.sqrt(plan.d_batch[j] * dim)
        noise = _rng(seed, 0, j).standard_normal(dim) * sd if sd else 0.0
        w = w - g_ * (grad + noise)
    handoff = task.loss_fine(w)
    for r in range(plan.n):
        grad = task.rho_hat * (w - task.w_fine)
        stage.append(1), rounds.append(r), gn.append(float(grad @ grad)), loss.append(task.loss_fine(w))
        b = plan.b_batch[:, r]
        agg = np.zeros(dim)
        for k in range(plan.K):
            sd = task.alpha_hat / math.sqrt(b[k] * dim)
            local = grad + (_rng(seed, 1, r, k).standard_normal(dim) * sd if sd else 0.0)
            agg += b[k] * local
        w = w - g_ * agg / b.sum()
    return SgdTrace(seed, np.array(stage, dtype=int), np.array(rounds, dtype=int), np.array(gn),
                    np.array(loss), handoff, task.loss_fine(w))


def write_trace_csv(trace: SgdTrace, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("stage", "round", "grad_norm_sq", "loss"))
        for s, r, g, l in zip(trace.stage, trace.rounds, trace.grad_norm_sq, trace.loss):
            w.writerow(("pretrain" if s == 0 else "finetune", int(r), repr(float(g)), repr(float(l))))


@dataclass
class InequalityCheck:
    name: str
    lhs: float
    rhs: float
    stderr: float
    scale: float = 1.0          # magnitude of the summed terms, for a rounding allowance

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + 2 * self.stderr + 1e-10 * self.scale


@dataclass
class LemmaReport:
    checks: list = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return all(c.holds for c in self.checks)

    def __getitem__(self, name):
        return next(c for c in self.checks if c.name == name)


MIN_SEEDS = 30


def _mc(values):
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0


def check_lemma_inequalities(traces, task: QuadraticTask, plan: Plan, upsilon: float | None = None) -> LemmaReport:
    """Monte-Carlo estimates of both sides of the two stage-wise descent inequalities.

    Per seed, the random part of each side is moved to the left so that the
    standard error covers everything that fluctuates.  Each side is judged
    at 2 standard errors.  On quadratics the pre-training inequality is an
    identity in expectation, so its only slack is ``task.shift_margin``.
    With ``upsilon`` the average-gradient bound is checked as well.
    """
    if len(traces) < MIN_SEEDS:
        raise ValueError(f"need at least {MIN_SEEDS} seeds, got {len(traces)}")
    g = task.gamma
    K = plan.K
    lam = float(np.sum(1.0 / plan.d_batch)) if plan.m else 0.0
    om = float(np.sum(1.0 / plan.b_batch.sum(axis=0))) if plan.n else 0.0
    cf = g * (1 - task.rho_hat * g / 2)
    cp = g * (1 - task.rho * g / 2)
    fine_lhs, pre_lhs, avg, mag = [], [], [], 0.0
    for t in traces:
        fine_sum = float(np.sum(t.grad_norm_sq[t.stage == 1]))
        pre_sum = float(np.sum(t.grad_norm_sq[t.stage == 0]))
        fine_lhs.append(t.final_loss_fine - t.handoff_loss_fine + cf * fine_sum)
        pre_lhs.append(t.handoff_loss_fine + cp * pre_sum)
        avg.append(t.mean_grad_norm_sq)
        mag = max(mag, abs(t.final_loss_fine), abs(t.handoff_loss_fine), cf * fine_sum, cp * pre_sum)
    out = LemmaReport()
    m1, s1 = _mc(fine_lhs)
    out.checks.append(InequalityCheck("finetune_descent", m1, task.rho_hat * task.alpha_hat**2 * K * g**2 / 2 * om, s1,
                                      scale=mag))
    if plan.m:
        m2, s2 = _mc(pre_lhs)
        rhs2 = task.rho * task.alpha**2 * g**2 / 2 * lam + task.loss_pre(task.w0) + task.shift_term(plan)
        out.checks.append(InequalityCheck("pretrain_descent", m2, float(rhs2), s2,
                                          scale=max(mag, task.loss_pre(task.w0))))
    if upsilon is not None:
        m3, s3 = _mc(avg)
        out.checks.append(InequalityCheck("average_gradient", m3, float(upsilon), s3, scale=max(m3, upsilon)))
    return out


def random_task(rng: np.random.Generator, dim=4, gamma=None, rho=None, rho_hat=None,
                alpha=1.0, alpha_hat=1.0, shift=1.0, shift_margin=0.1) -> QuadraticTask:
    """Quadratic task with optima ``shift`` apart and a random start."""
    rho = float(rng.uniform(0.5, 2.0)) if rho is None else rho
    rho_hat = float(rng.uniform(0.5, 2.0)) if rho_hat is None else rho_hat
    gamma = 0.5 / max(rho, rho_hat) if gamma is None else gamma
    w_pre = rng.standard_normal(dim)
    u = rng.standard_normal(dim)
    w_fine = w_pre + shift * u / np.linalg.norm(u)
    w0 = w_pre + 2.0 * rng.standard_normal(dim)
    return QuadraticTask(dim, rho, rho_hat, alpha, alpha_hat, w_pre, w_fine, w0, gamma,
                         shift_margin=shift_margin)


def monte_carlo(task: QuadraticTask, plan: Plan, seeds) -> list[SgdTrace]:
    return [run_synthetic_sgd(task, plan, int(s)) for s in seeds]


def bound_for(task: QuadraticTask, plan: Plan) -> float:
    from .bound import convergence_bound

    return convergence_bound(task.learning_profile(plan), plan.K, plan.d_batch, plan.b_batch).upsilon


# -- random instances ----------------------------------------------------------------

def random_scenario(rng: np.random.Generator, K: int = 3, m_max: int = 3, n_max: int = 3,
                    tightness=(0.2, 0.7), name="random") -> ScenarioConfig:
    """Small scenario whose budgets cut into the full-throttle allocation.

    Both budgets are a random fraction of what ``m_max`` pre-training plus
    ``n_max`` fine-tuning rounds would cost at maximal batch, clock and power.
    """

    u = lambda lo, hi: float(rng.uniform(lo, hi))
    devs = []
    for k in range(K):
        p_max = u(0.2, 1.0)
        devs.append(DeviceProfile(
            id=k, g_up=10 ** u(-6, -4), g_down=10 ** u(-6, -4), bw_up_hz=1e5, noise_up_psd=1e-16,
            noise_down_psd=1e-16, p_ave_w=p_max * u(0.5, 1.0), p_max_w=p_max, f_max_hz=u(1e8, 5e8),
            pue=1.0, power_coeff=u(1e-27, 3e-27), batch_max=float(rng.integers(100, 701))))
    srv = ServerProfile(f_max_hz=1.6e9, pue=u(1.0, 4.0), power_coeff=3.91e-27, tx_power_w=0.5,
                        bw_down_hz=1e5, batch_max=700.0)
    lrn = LearningProfile(gamma=0.01, rho=1.0, rho_hat=1.0, alpha=u(10, 50), alpha_hat=u(10, 50),
                          rho_tilde=1.0, wdist=u(0.0, 0.2), loss_gap=u(0.1, 2.0), n_flop=1e6, model_bits=2e5)
    # full-throttle cost of one round of each stage
    pre_cyc = srv.batch_max * lrn.n_flop / srv.flops_per_cycle
    pre_d, pre_e = pre_cyc / srv.f_max_hz, srv.pue * pre_cyc * srv.power_coeff * srv.f_max_hz**2
    fin_d, fin_e = 0.0, 0.0
    for d in devs:
        t_up = lrn.model_bits / _rate(d.bw_up_hz, d.g_up, d.p_max_w, d.noise_up_psd)
        t_dn = lrn.model_bits / _rate(srv.bw_down_hz, d.g_down, srv.tx_power_w, d.noise_down_psd)
        cyc = d.batch_max * lrn.n_flop / d.flops_per_cycle
        fin_d = max(fin_d, t_dn + cyc / d.f_max_hz + t_up)
        fin_e += d.pue * cyc * d.power_coeff * d.f_max_hz**2 + d.p_max_w * t_up + srv.tx_power_w * t_dn
    bud = Budgets(tau0_s=u(*tightness) * (m_max * pre_d + n_max * fin_d),
                  e0_j=u(*tightness) * (m_max * pre_e + n_max * fin_e))
    return ScenarioConfig(tuple(devs), srv, lrn, bud, SearchSpace(m_max=m_max, n_max=n_max), name=name)
