"""Closed-form rates, delays and energies of the two-stage system.

All functions are pure and vectorise over numpy arrays.  A zero uplink rate
with a positive payload gives an infinite delay rather than an exception, so a
search can simply discard the point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config_model import (
    DeviceProfile,
    EvaluationReport,
    LearningProfile,
    Plan,
    ScenarioConfig,
    ServerProfile,
    Violation,
    validate_plan,
)

_LN2 = np.log(2.0)


def shannon_rate(bw_hz, gain, power, noise_psd):
    """bw * log2(1 + gain * power / (bw * noise_psd)), evaluated through log1p."""
    snr = np.asarray(gain, dtype=float) * np.asarray(power, dtype=float) / (bw_hz * noise_psd)
    return bw_hz * np.log1p(snr) / _LN2


def uplink_rate(dev: DeviceProfile, p_w, n: int | None = None):
    if np.any(np.asarray(p_w) < 0):
        raise ValueError("transmit power must be >= 0")
    g = dev.gain_up(n)
    r = shannon_rate(dev.bw_up_hz, g, p_w, dev.noise_up_psd)
    return float(r) if np.ndim(r) == 0 else r


def downlink_rate(dev: DeviceProfile, server: ServerProfile, n: int | None = None) -> float:
    g = dev.gain_down(n)
    return float(shannon_rate(server.bw_down_hz, g, server.tx_power_w, dev.noise_down_psd))


def _transfer_time(bits, rate):
    rate = np.asarray(rate, dtype=float)
    with np.errstate(divide="ignore"):
        t = np.where(rate > 0, bits / np.where(rate > 0, rate, 1.0), np.inf)
    return t if t.ndim else float(t)


def pretrain_delay(server: ServerProfile, learning: LearningProfile, d_batch, f_server) -> float:
    d = np.asarray(d_batch, dtype=float)
    f = np.asarray(f_server, dtype=float)
    if d.shape != f.shape:
        raise ValueError("d_batch and f_server must have the same length")
    if np.any((f <= 0) & (d > 0)):
        raise ValueError("zero server clock with a positive batch")
    work = d * learning.n_flop / server.flops_per_cycle
    return float(np.sum(np.divide(work, f, out=np.zeros_like(work), where=d > 0)))


def pretrain_energy(server: ServerProfile, learning: LearningProfile, d_batch, f_server) -> float:
    d = np.asarray(d_batch, dtype=float)
    f = np.asarray(f_server, dtype=float)
    return float(np.sum(server.pue * d * learning.n_flop / server.flops_per_cycle * server.power_coeff * f**2))


def _device_arrays(cfg: ScenarioConfig):
    devs = cfg.devices
    return (
        np.array([d.flops_per_cycle for d in devs]),
        np.array([d.pue for d in devs]),
        np.array([d.power_coeff for d in devs]),
    )


def download_delays(cfg: ScenarioConfig, n: int | None = None) -> np.ndarray:
    bits = cfg.learning.model_bits
    return np.array([_transfer_time(bits, downlink_rate(d, cfg.server, n)) for d in cfg.devices])


def upload_delays(cfg: ScenarioConfig, p, n: int | None = None) -> np.ndarray:
    bits = cfg.learning.model_bits
    return np.array([_transfer_time(bits, uplink_rate(d, pk, n)) for d, pk in zip(cfg.devices, p)])


def finetune_round_terms(cfg: ScenarioConfig, n: int | None, b, f, p):
    """Per-device (download, compute, upload) delays for one fine-tuning round."""
    c_hat, _, _ = _device_arrays(cfg)
    b = np.asarray(b, dtype=float)
    f = np.asarray(f, dtype=float)
    if np.any((f <= 0) & (b > 0)):
        raise ValueError("zero device clock with a positive batch")
    work = b * cfg.learning.n_flop / c_hat
    compute = np.divide(work, f, out=np.zeros_like(work), where=b > 0)
    return download_delays(cfg, n), compute, upload_delays(cfg, p, n)


def finetune_round_delay(cfg: ScenarioConfig, b, f, p, n: int | None = None) -> float:
    dl, comp, ul = finetune_round_terms(cfg, n, b, f, p)
    return float(np.max(dl + comp + ul))


def finetune_energy_components(cfg: ScenarioConfig, b, f, p, n: int | None = None):
    """Return (compute energy per device, upload energy per device, server download energy)."""
    c_hat, eta_hat, phi_hat = _device_arrays(cfg)
    b = np.asarray(b, dtype=float)
    f = np.asarray(f, dtype=float)
    p = np.asarray(p, dtype=float)
    compute = eta_hat * b * cfg.learning.n_flop / c_hat * phi_hat * f**2
    ul = upload_delays(cfg, p, n)
    with np.errstate(invalid="ignore"):
        upload = np.where(np.isfinite(ul), p * ul, np.inf)
    download = cfg.server.tx_power_w * float(np.max(download_delays(cfg, n)))
    return compute, upload, download


@dataclass(frozen=True)
class RoundLedger:
    stage: str
    index: int
    download_delay: np.ndarray | None = None
    compute_delay: np.ndarray | None = None
    upload_delay: np.ndarray | None = None
    round_delay: float = 0.0
    compute_energy: np.ndarray | None = None
    upload_energy: np.ndarray | None = None
    download_energy: float = 0.0

    @property
    def energy(self) -> float:
        e = self.download_energy
        if self.compute_energy is not None:
            e += float(np.sum(self.compute_energy))
        if self.upload_energy is not None:
            e += float(np.sum(self.upload_energy))
        return e


def round_ledgers(cfg: ScenarioConfig, plan: Plan) -> list[RoundLedger]:
    plan.check_shapes(cfg.K)
    srv, lrn = cfg.server, cfg.learning
    out = []
    for m in range(plan.m):
        d, f = plan.d_batch[m : m + 1], plan.f_server[m : m + 1]
        out.append(RoundLedger(
            "pretrain", m,
            round_delay=pretrain_delay(srv, lrn, d, f),
            compute_energy=np.array([pretrain_energy(srv, lrn, d, f)]),
        ))
    for n in range(plan.n):
        b, f, p = plan.b_batch[:, n], plan.f_device[:, n], plan.p_up[:, n]
        dl, comp, ul = finetune_round_terms(cfg, n, b, f, p)
        e_comp, e_up, e_dl = finetune_energy_components(cfg, b, f, p, n)
        out.append(RoundLedger(
            "finetune", n, dl, comp, ul, float(np.max(dl + comp + ul)), e_comp, e_up, e_dl,
        ))
    return out


def make_report(cfg: ScenarioConfig, plan: Plan, per_delay: dict, per_energy: dict,
                upsilon: float | None, extra: list[Violation] | None = None) -> EvaluationReport:
    """Assemble totals, budget checks and box checks into an EvaluationReport."""
    pre_d = float(np.sum(per_delay["pretrain"]))
    fin_d = float(np.sum(per_delay["finetune"]))
    pre_e = float(np.sum(per_energy["pretrain"]))
    fin_e = float(np.sum(per_energy["finetune"]))
    delay, energy = pre_d + fin_d, pre_e + fin_e
    viol = list(extra or [])
    if plan.m + plan.n == 0:
        viol.append(Violation("empty_plan", 1.0))
    viol += validate_plan(cfg, plan)
    if not delay <= cfg.budgets.tau0_s:
        viol.append(Violation("delay_budget", delay - cfg.budgets.tau0_s))
    if not energy <= cfg.budgets.e0_j:
        viol.append(Violation("energy_budget", energy - cfg.budgets.e0_j))
    return EvaluationReport(
        upsilon=upsilon,
        total_delay_s=delay, total_energy_j=energy,
        pretrain_delay_s=pre_d, finetune_delay_s=fin_d,
        pretrain_energy_j=pre_e, finetune_energy_j=fin_e,
        per_round_delay=per_delay, per_round_energy=per_energy,
        feasible=not viol, violations=tuple(viol),
    )


def plan_upsilon(cfg: ScenarioConfig, plan: Plan) -> float | None:
    """Bound value of a plan, or None when it is undefined (no rounds, batch < 1)."""
    from .bound import convergence_bound

    if plan.m + plan.n == 0 or np.any(plan.d_batch < 1) or (plan.n and np.any(plan.b_batch < 1)):
        return None
    return convergence_bound(cfg.learning, cfg.K, plan.d_batch, plan.b_batch).upsilon


def comm_delays(cfg: ScenarioConfig, p_up) -> tuple[np.ndarray, np.ndarray]:
    """Download and upload delays, both K x N, for uplink powers ``p_up`` (K x N)."""
    p_up = np.asarray(p_up, dtype=float)
    n_rounds = p_up.shape[1]
    srv, bits = cfg.server, cfg.learning.model_bits
    per_round = any(isinstance(dv.g_up, tuple) or isinstance(dv.g_down, tuple) for dv in cfg.devices)
    rounds = range(n_rounds) if per_round else [None]
    g_up = np.array([[dv.gain_up(n if isinstance(dv.g_up, tuple) else None) for n in rounds]
                     for dv in cfg.devices])
    g_dn = np.array([[dv.gain_down(n if isinstance(dv.g_down, tuple) else None) for n in rounds]
                     for dv in cfg.devices])
    w_up = np.array([dv.bw_up_hz for dv in cfg.devices])[:, None]
    n0_up = np.array([dv.noise_up_psd for dv in cfg.devices])[:, None]
    n0_dn = np.array([dv.noise_down_psd for dv in cfg.devices])[:, None]
    r_dn = shannon_rate(srv.bw_down_hz, g_dn, srv.tx_power_w, n0_dn)
    d_dl = _transfer_time(bits, r_dn) * np.ones((cfg.K, n_rounds))
    d_ul = _transfer_time(bits, shannon_rate(w_up, g_up, p_up, n0_up))
    return d_dl, np.asarray(d_ul, dtype=float).reshape(cfg.K, n_rounds)


def totals(cfg: ScenarioConfig, plan: Plan) -> EvaluationReport:
    """Vectorised evaluation of the whole plan against budgets and box constraints."""
    plan.check_shapes(cfg.K)
    srv, lrn = cfg.server, cfg.learning
    d, f = plan.d_batch, plan.f_server
    if np.any((f <= 0) & (d > 0)):
        raise ValueError("zero server clock with a positive batch")
    pre_work = d * lrn.n_flop / srv.flops_per_cycle
    pre_delay = np.divide(pre_work, f, out=np.zeros_like(pre_work), where=d > 0)
    pre_energy = srv.pue * pre_work * srv.power_coeff * f**2

    fin_delay = np.zeros(plan.n)
    fin_energy = np.zeros(plan.n)
    if plan.n:
        c_hat, eta_hat, phi_hat = _device_arrays(cfg)
        d_dl, d_ul = comm_delays(cfg, plan.p_up)
        b, fh = plan.b_batch, plan.f_device
        if np.any((fh <= 0) & (b > 0)):
            raise ValueError("zero device clock with a positive batch")
        work = b * lrn.n_flop / c_hat[:, None]
        d_comp = np.divide(work, fh, out=np.zeros_like(work), where=b > 0)
        fin_delay = np.max(d_dl + d_comp + d_ul, axis=0)
        with np.errstate(invalid="ignore"):
            e_up = np.where(np.isfinite(d_ul), plan.p_up * d_ul, np.inf)
        e_comp = eta_hat[:, None] * work * phi_hat[:, None] * fh**2
        fin_energy = srv.tx_power_w * np.max(d_dl, axis=0) + np.sum(e_comp + e_up, axis=0)

    return make_report(
        cfg, plan,
        {"pretrain": pre_delay, "finetune": fin_delay},
        {"pretrain": pre_energy, "finetune": fin_energy},
        plan_upsilon(cfg, plan),
    )
