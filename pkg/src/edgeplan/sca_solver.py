"""Continuous inner problem for a fixed number of rounds (M, N).

The batch sizes enter the delay and energy expressions through auxiliary
reciprocals D' and B' (D <= 1/D', B <= 1/B').  Three pieces are non-convex:
the two linking constraints and the upload energy p*beta/r(p).  Each SCA
iteration replaces them by first-order expansions around the current point
and solves the resulting convex program with the barrier method.

Rounds with identical channel gains are interchangeable, so by default they
are merged into weighted groups: one pre-training group of weight M, and one
fine-tuning group per distinct gain tuple.  ``collapse=False`` keeps one
group per round (same optimum, larger program).

Internally every variable is divided by its box maximum and every constraint
by its budget, which keeps Newton systems well conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .barrier import barrier_solve, find_strictly_feasible
from .config_model import Plan, ScenarioConfig

LN2 = np.log(2.0)
FIXABLE = frozenset({"power", "clock", "batch"})
# heuristic start shrinks the reciprocal slightly so the linking rows have slack
_LINK_SLACK = 1e-3


# -- problem description ------------------------------------------------------

@dataclass
class P2Problem:
    cfg: ScenarioConfig
    m: int
    n: int
    K: int
    pre_weight: np.ndarray                 # (Gp,)
    fin_weight: np.ndarray                 # (Gf,)
    fin_groups: tuple                      # round indices of each fine-tuning group
    snr: np.ndarray                        # (Gf, K) uplink gain / (W N0)
    dl: np.ndarray                         # (Gf, K) download delays
    fixed: frozenset
    index: dict                            # name -> index array into the full vector
    nvar: int
    lo: np.ndarray
    hi: np.ndarray
    scale: np.ndarray
    free: np.ndarray                       # bool mask
    base: np.ndarray                       # values of fixed variables
    rows: list                             # constraint names
    static_violations: list = field(default_factory=list)
    consts: dict = field(default_factory=dict)

    @property
    def n_epigraph(self) -> int:
        return self.index["t"].size

    @property
    def n_decision(self) -> int:
        return self.nvar - self.n_epigraph

    @property
    def objective_is_constant(self) -> bool:
        c = self.consts
        return (c["cpre"] == 0 or self.m == 0 or "batch" in self.fixed) and \
               (c["cfin"] == 0 or self.n == 0 or "batch" in self.fixed)

    def values(self, x, name):
        return x[self.index[name]]

    # objective: allocation-dependent noise part of the bound
    def noise_objective(self, x, order=0):
        c = self.consts
        iD, iB = self.index["D"], self.index["B"]
        D = x[iD]
        f = c["cpre"] * np.sum(self.pre_weight / D)
        S = x[iB].sum(axis=1) if iB.size else np.zeros(0)
        f += c["cfin"] * np.sum(self.fin_weight / S)
        if order == 0:
            return float(f), None, None
        g = np.zeros(self.nvar)
        g[iD] = -c["cpre"] * self.pre_weight / D**2
        if iB.size:
            g[iB] = (-c["cfin"] * self.fin_weight / S**2)[:, None]
        if order == 1:
            return float(f), g, None
        H = np.zeros((self.nvar, self.nvar))
        H[iD, iD] = 2 * c["cpre"] * self.pre_weight / D**3
        for i in range(iB.shape[0]):
            blk = iB[i]
            H[np.ix_(blk, blk)] = 2 * c["cfin"] * self.fin_weight[i] / S[i] ** 3
        return float(f), g, H

    def upsilon(self, x) -> float:
        return self.noise_objective(x)[0] + self.consts["const_term"]

    def uplink_delay(self, p):
        """beta / r_u(p) per group and device."""
        L = np.log1p(self.snr * p)
        with np.errstate(divide="ignore"):
            return self.consts["bln"] / L

    def true_constraints(self, x) -> np.ndarray:
        """Normalised constraint values of the original reformulated problem (<= 0 is feasible)."""
        c = self.consts
        ix = self.index
        out = []
        D, Dp, f = x[ix["D"]], x[ix["Dp"]], x[ix["f"]]
        B, Bp, fh, p, t = (x[ix[k]] for k in ("B", "Bp", "fh", "p", "t"))
        if "power" not in self.fixed and self.n:
            out.extend(self.fin_weight @ p / (self.n * c["p_ave"]) - 1.0)
        if "batch" not in self.fixed:
            out.extend((D - 1.0 / Dp) / c["d_max"])
            out.extend(((B - 1.0 / Bp) / c["b_max"]).ravel())
        q = self.uplink_delay(p) if self.n else np.zeros((0, self.K))
        if self.n:
            expr = self.dl + c["a_fin"] / (fh * Bp) + q
            out.extend(((expr - t[:, None]) / c["t_norm"]).ravel())
        delay = np.sum(self.pre_weight * c["a_pre"] / (f * Dp)) + np.sum(self.fin_weight * t)
        out.append(delay / c["tau0"] - 1.0)
        energy = np.sum(self.pre_weight * c["e_pre"] * f**2 / Dp) + c["e_dl"]
        if self.n:
            energy += np.sum(self.fin_weight[:, None] * (c["e_fin"] * fh**2 / Bp + p * q))
        out.append(energy / c["e0"] - 1.0)
        return np.asarray(out, dtype=float)

    def max_violation(self, x) -> float:
        if self.static_violations:
            return float("inf")
        c = self.true_constraints(x)
        inside = np.all(x[self.free] > self.lo[self.free]) and np.all(x[self.free] <= self.hi[self.free])
        return max(0.0, float(np.max(c))) if inside else float("inf")

    def budget_lower_bounds(self) -> tuple[float, float]:
        """Delay and energy no allocation can beat (box extremes, upload energy at p -> 0)."""
        c = self.consts
        delay = self.m * c["a_pre"] / self.cfg.server.f_max_hz
        energy = c["e_dl"]
        if self.n:
            fh_max = np.array([dv.f_max_hz for dv in self.cfg.devices])
            p_max = np.array([dv.p_max_w for dv in self.cfg.devices])
            fh = np.where(self.free[self.index["fh"]], fh_max, self.base[self.index["fh"]])
            p = np.where(self.free[self.index["p"]], p_max, self.base[self.index["p"]])
            b = np.where(self.free[self.index["B"]], 1.0, self.base[self.index["B"]])
            expr = self.dl + c["a_fin"] * b / fh + self.uplink_delay(p)
            delay += float(np.sum(self.fin_weight * np.max(expr, axis=1)))
            if "power" in self.fixed:
                up = p * self.uplink_delay(p)
            else:
                with np.errstate(divide="ignore"):
                    up = c["bln"] / self.snr
            energy += float(np.sum(self.fin_weight[:, None] * up))
        srv = self.cfg.server
        d_min = srv.batch_max if "batch" in self.fixed else 1.0
        if self.m:
            delay += self.m * c["a_pre"] * (d_min - 1.0) / srv.f_max_hz
        if "clock" in self.fixed:
            energy += self.m * c["e_pre"] * d_min * srv.f_max_hz**2
            if self.n:
                energy += float(np.sum(self.fin_weight[:, None] * c["e_fin"] * b * fh**2))
        return delay, energy

    def feasible(self, x) -> bool:
        return self.max_violation(x) <= 0.0

    def to_plan(self, x) -> Plan:
        """Expand group values into a continuous per-round plan."""
        ix = self.index
        d = np.zeros(self.m)
        fs = np.zeros(self.m)
        if self.m:
            reps = np.repeat(np.arange(self.pre_weight.size), self.pre_weight.astype(int))
            d, fs = x[ix["D"]][reps], x[ix["f"]][reps]
        shape = (self.K, self.n)
        b, fh, p = np.zeros(shape), np.zeros(shape), np.zeros(shape)
        for g, rounds in enumerate(self.fin_groups):
            for r in rounds:
                b[:, r] = x[ix["B"]][g]
                fh[:, r] = x[ix["fh"]][g]
                p[:, r] = x[ix["p"]][g]
        return Plan(self.m, self.n, d, fs, b, fh, p)


def _gain_groups(cfg: ScenarioConfig, n: int, collapse: bool):
    keys = []
    for r in range(n):
        keys.append(tuple((dv.gain_up(r if isinstance(dv.g_up, tuple) else None),
                           dv.gain_down(r if isinstance(dv.g_down, tuple) else None))
                          for dv in cfg.devices))
    if not collapse:
        return [(r,) for r in range(n)], keys
    order, seen = [], {}
    for r, k in enumerate(keys):
        if k not in seen:
            seen[k] = len(order)
            order.append([])
        order[seen[k]].append(r)
    return [tuple(g) for g in order], [keys[g[0]] for g in order]


def build_p2(cfg: ScenarioConfig, m: int, n: int, fixed=(), collapse: bool = True) -> P2Problem:
    """Reformulated continuous problem for ``m`` pre-training and ``n`` fine-tuning rounds.

    ``fixed`` may contain "power" (p = P_max), "clock" (f = f_max) and
    "batch" (D = D_max, B = B_max); fixed variables leave the decision vector.
    """
    if m < 0 or n < 0 or m + n < 1:
        raise ValueError("need m + n >= 1")
    fixed = frozenset(fixed)
    if not fixed <= FIXABLE:
        raise ValueError(f"unknown fixed groups: {sorted(fixed - FIXABLE)}")
    K = cfg.K
    srv, lrn, bud = cfg.server, cfg.learning, cfg.budgets
    devs = cfg.devices

    Gp = (m if not collapse else 1) if m else 0
    pre_weight = np.full(Gp, 1.0 if not collapse else float(m)) if Gp else np.zeros(0)
    groups, keys = _gain_groups(cfg, n, collapse)
    Gf = len(groups)
    fin_weight = np.array([len(g) for g in groups], dtype=float)

    w_up = np.array([dv.bw_up_hz for dv in devs])
    n0_up = np.array([dv.noise_up_psd for dv in devs])
    n0_dn = np.array([dv.noise_down_psd for dv in devs])
    g_up = np.array([[k[j][0] for j in range(K)] for k in keys]).reshape(Gf, K)
    g_dn = np.array([[k[j][1] for j in range(K)] for k in keys]).reshape(Gf, K)
    snr = g_up / (w_up * n0_up)
    r_dn = srv.bw_down_hz * np.log1p(g_dn * srv.tx_power_w / (srv.bw_down_hz * n0_dn)) / LN2
    with np.errstate(divide="ignore"):
        dl = np.where(r_dn > 0, lrn.model_bits / np.where(r_dn > 0, r_dn, 1.0), np.inf)

    # layout
    index, pos = {}, 0
    for name, shape in (("D", (Gp,)), ("Dp", (Gp,)), ("f", (Gp,)), ("B", (Gf, K)), ("Bp", (Gf, K)),
                        ("fh", (Gf, K)), ("p", (Gf, K)), ("t", (Gf,))):
        size = int(np.prod(shape))
        index[name] = np.arange(pos, pos + size).reshape(shape)
        pos += size
    nvar = pos

    b_max = np.array([dv.batch_max for dv in devs])
    fh_max = np.array([dv.f_max_hz for dv in devs])
    p_max = np.array([dv.p_max_w for dv in devs])
    p_ave = np.array([dv.p_ave_w for dv in devs])
    tiles = lambda v: np.tile(v, Gf)
    lo = np.concatenate([np.ones(Gp), np.zeros(Gp), np.zeros(Gp), np.ones(Gf * K), np.zeros(Gf * K),
                         np.zeros(Gf * K), np.zeros(Gf * K), np.full(Gf, -np.inf)])
    hi = np.concatenate([np.full(Gp, srv.batch_max), np.ones(Gp), np.full(Gp, srv.f_max_hz),
                         tiles(b_max), np.ones(Gf * K), tiles(fh_max), tiles(p_max), np.full(Gf, np.inf)])
    t_norm = bud.tau0_s / (m + n)
    scale = np.concatenate([np.full(Gp, srv.batch_max), np.full(Gp, 1.0 / srv.batch_max),
                            np.full(Gp, srv.f_max_hz), tiles(b_max), tiles(1.0 / b_max), tiles(fh_max),
                            tiles(p_max), np.full(Gf, t_norm)])

    free = np.ones(nvar, dtype=bool)
    base = np.zeros(nvar)
    static = []
    if "power" in fixed:
        free[index["p"].ravel()] = False
        base[index["p"]] = p_max
        for k, dv in enumerate(devs):
            if n and dv.p_max_w > dv.p_ave_w:
                static.append((f"device{dv.id}_power_average", dv.p_max_w - dv.p_ave_w))
    if "clock" in fixed:
        free[index["f"]] = False
        base[index["f"]] = srv.f_max_hz
        free[index["fh"].ravel()] = False
        base[index["fh"]] = fh_max
    if "batch" in fixed:
        for nm in ("D", "Dp", "B", "Bp"):
            free[index[nm].ravel()] = False
        base[index["D"]] = srv.batch_max
        base[index["Dp"]] = 1.0 / srv.batch_max
        base[index["B"]] = b_max
        base[index["Bp"]] = 1.0 / b_max

    c_hat = np.array([dv.flops_per_cycle for dv in devs])
    eta_hat = np.array([dv.pue for dv in devs])
    phi_hat = np.array([dv.power_coeff for dv in devs])
    total = m + n
    consts = dict(
        a_pre=lrn.n_flop / srv.flops_per_cycle,
        e_pre=srv.pue * lrn.n_flop / srv.flops_per_cycle * srv.power_coeff,
        a_fin=lrn.n_flop / c_hat,
        e_fin=eta_hat * lrn.n_flop / c_hat * phi_hat,
        bln=lrn.model_bits * LN2 / w_up,
        e_dl=float(np.sum(fin_weight * srv.tx_power_w * np.max(dl, axis=1))) if Gf else 0.0,
        cpre=lrn.gamma * lrn.rho * lrn.alpha**2 / total,
        cfin=lrn.gamma * lrn.rho_hat * lrn.alpha_hat**2 * K / total,
        const_term=(2 * lrn.shift * (m > 0) + 2 * lrn.loss_gap) / (total * lrn.gamma),
        tau0=bud.tau0_s, e0=bud.e0_j, t_norm=t_norm,
        d_max=srv.batch_max, b_max=b_max, p_ave=p_ave,
    )
    ids = [dv.id for dv in devs]
    rows = []
    if "power" not in fixed and n:
        rows += [f"device{i}_power_average" for i in ids]
    if "batch" not in fixed:
        rows += [f"pretrain_link[{j}]" for j in range(Gp)]
        rows += [f"device{i}_link[{g}]" for g in range(Gf) for i in ids]
    rows += [f"device{i}_round_delay[{g}]" for g in range(Gf) for i in ids]
    rows += ["delay_budget", "energy_budget"]
    return P2Problem(cfg, m, n, K, pre_weight, fin_weight, tuple(groups), snr, dl, fixed, index, nvar,
                     lo, hi, scale, free, base, rows, static, consts)


# -- initial points --------------------------------------------------------------

def interior(z, lo, hi, rel=1e-9):
    """Pull z strictly inside [lo, hi] by a relative margin (infinite sides untouched)."""
    width = np.where(np.isfinite(lo) & np.isfinite(hi), hi - lo, 1.0)
    z = np.where(np.isfinite(lo), np.maximum(z, lo + rel * width), z)
    return np.where(np.isfinite(hi), np.minimum(z, hi - rel * width), z)


def _fill_epigraph(prob: P2Problem, x, pad=0.05):
    if prob.n:
        ix = prob.index
        expr = prob.dl + prob.consts["a_fin"] / (x[ix["fh"]] * x[ix["Bp"]]) + prob.uplink_delay(x[ix["p"]])
        mx = np.max(expr, axis=1)
        x[ix["t"]] = mx + pad * np.abs(mx) + 1e-12
    return x


def heuristic_point(prob: P2Problem) -> np.ndarray:
    """Batches at half their maximum, clocks at 70 %, powers at half the tighter power limit."""
    x = prob.base.copy()
    ix, fr = prob.index, prob.free
    srv, devs = prob.cfg.server, prob.cfg.devices

    def put(name, val):
        idx = ix[name]
        vals = np.broadcast_to(val, idx.shape)
        mask = fr[idx]
        x[idx[mask]] = vals[mask]

    put("D", 0.5 * srv.batch_max)
    put("f", 0.7 * srv.f_max_hz)
    put("B", np.array([0.5 * dv.batch_max for dv in devs]))
    put("fh", np.array([0.7 * dv.f_max_hz for dv in devs]))
    put("p", np.array([0.5 * min(dv.p_ave_w, dv.p_max_w) for dv in devs]))
    x[ix["D"]] = np.maximum(x[ix["D"]], 1.0)
    x[ix["B"]] = np.maximum(x[ix["B"]], 1.0)
    put("Dp", (1 - _LINK_SLACK) / x[ix["D"]])
    put("Bp", (1 - _LINK_SLACK) / x[ix["B"]])
    return _fill_epigraph(prob, x)


def lean_point(prob: P2Problem, clock_frac=0.95, power_frac=0.95) -> np.ndarray:
    """Unit batches with fast clocks: near the smallest achievable delay."""
    x = heuristic_point(prob)
    ix, fr = prob.index, prob.free
    srv, devs = prob.cfg.server, prob.cfg.devices
    for name, val in (("D", 1.0 + 1e-6), ("f", clock_frac * srv.f_max_hz),
                      ("B", 1.0 + 1e-6), ("fh", np.array([clock_frac * dv.f_max_hz for dv in devs])),
                      ("p", np.array([power_frac * min(dv.p_ave_w, dv.p_max_w) for dv in devs]))):
        idx = ix[name]
        mask = fr[idx]
        x[idx[mask]] = np.broadcast_to(val, idx.shape)[mask]
    for a, b in (("D", "Dp"), ("B", "Bp")):
        mask = fr[ix[b]]
        x[ix[b][mask]] = ((1 - _LINK_SLACK) / x[ix[a]])[mask]
    return _fill_epigraph(prob, x)


_RESTART_MIXES = ((0.95, 0.95), (0.95, 0.3), (0.6, 0.6))


def point_from_plan(prob: P2Problem, plan: Plan) -> np.ndarray:
    """Group values taken from the first round of each group; reciprocals from the batches."""
    x = heuristic_point(prob)
    ix, fr = prob.index, prob.free

    def put(name, val):
        idx = ix[name]
        mask = fr[idx]
        x[idx[mask]] = np.broadcast_to(val, idx.shape)[mask]

    if prob.m and plan.m:
        put("D", np.full(prob.pre_weight.size, plan.d_batch[0]) if prob.pre_weight.size != plan.m
            else plan.d_batch)
        put("f", np.full(prob.pre_weight.size, plan.f_server[0]) if prob.pre_weight.size != plan.m
            else plan.f_server)
    if prob.n and plan.n:
        for g, rounds in enumerate(prob.fin_groups):
            r = min(rounds[0], plan.n - 1)
            for name, arr in (("B", plan.b_batch), ("fh", plan.f_device), ("p", plan.p_up)):
                idx = ix[name][g]
                mask = fr[idx]
                x[idx[mask]] = arr[:, r][mask]
    # tight reciprocals and epigraph so that a feasible plan maps to a feasible point
    put("Dp", (1 - 1e-12) / x[ix["D"]])
    put("Bp", (1 - 1e-12) / x[ix["B"]])
    x[fr] = interior(x[fr] / prob.scale[fr], prob.lo[fr] / prob.scale[fr],
                     prob.hi[fr] / prob.scale[fr]) * prob.scale[fr]
    return _fill_epigraph(prob, x, pad=1e-12)


def initial_point(prob: P2Problem, init=None) -> np.ndarray:
    if init is None:
        return heuristic_point(prob)
    if isinstance(init, SolveResult):
        return point_from_plan(prob, init.plan())
    if isinstance(init, Plan):
        return point_from_plan(prob, init)
    x = np.array(init, dtype=float)
    if x.shape != (prob.nvar,):
        raise ValueError(f"initial vector has shape {x.shape}, expected ({prob.nvar},)")
    x[~prob.free] = prob.base[~prob.free]
    return x


# -- surrogate ----------------------------------------------------------------------

@dataclass
class Surrogate:
    """Convex restriction of the reformulated problem around an expansion point.

    c(x) = A x + b + sum of monomials coef * x_i^a * x_j^b + coef * q(p),
    with q(p) = beta ln2 / (W ln(1 + snr p)) the uplink delay.
    """

    problem: P2Problem
    point: np.ndarray
    u: np.ndarray            # upload energy slope at the expansion point, (Gf, K)
    h0: np.ndarray           # upload energy at the expansion point, (Gf, K)
    A: np.ndarray
    b: np.ndarray
    mono: tuple              # rows, coef, ix, iy, a, b
    upl: tuple               # rows, coef, ip, snr

    @property
    def n_rows(self) -> int:
        return self.b.size

    def zeta(self, p):
        """Linearised upload energy at power ``p`` (shape (Gf, K) or broadcastable)."""
        return self.h0 + self.u * (p - self.problem.values(self.point, "p"))

    def objective(self, x, order):
        return self.problem.noise_objective(x, order)

    def constraints(self, x, order):
        rows, coef, ix, iy, a, b = self.mono
        xa, xb = x[ix], x[iy]
        F = coef * xa**a * xb**b
        qr, qc, ip, snr = self.upl
        pp = x[ip]
        L = np.log1p(snr * pp)
        with np.errstate(divide="ignore"):
            q = qc / L
        m = self.n_rows
        c = self.A @ x + self.b + np.bincount(rows, F, minlength=m) + np.bincount(qr, q, minlength=m)
        if order == 0:
            return c, None, None
        J = self.A.copy()
        np.add.at(J, (rows, ix), F * a / xa)
        np.add.at(J, (rows, iy), F * b / xb)
        den = 1.0 + snr * pp
        dq = -q * snr / (den * L)
        np.add.at(J, (qr, ip), dq)
        if order == 1:
            return c, J, None
        d2q = q * snr**2 * (2.0 + L) / (den**2 * L**2)
        haa, hbb, hab = F * a * (a - 1) / xa**2, F * b * (b - 1) / xb**2, F * a * b / (xa * xb)
        n = x.size

        def hess(w):
            H = np.zeros((n, n))
            wr = w[rows]
            np.add.at(H, (ix, ix), wr * haa)
            np.add.at(H, (iy, iy), wr * hbb)
            np.add.at(H, (ix, iy), wr * hab)
            np.add.at(H, (iy, ix), wr * hab)
            np.add.at(H, (ip, ip), w[qr] * d2q)
            return H

        return c, J, hess


def surrogate_at(prob: P2Problem, point) -> Surrogate:
    """Linearise the linking constraints and the upload energy at ``point``."""
    x0 = np.asarray(point, dtype=float)
    ix, fr, c = prob.index, prob.free, prob.consts
    K, Gp, Gf = prob.K, prob.pre_weight.size, prob.fin_weight.size
    for name in ("Dp", "Bp", "p", "f", "fh"):
        if np.any(x0[ix[name]] <= 0):
            raise ValueError(f"expansion point has non-positive {name}")
    if np.any(x0[ix["D"]] < 1) or np.any(x0[ix["B"]] < 1):
        raise ValueError("expansion point has a batch below 1")

    nrow = len(prob.rows)
    A = np.zeros((nrow, prob.nvar))
    b = np.zeros(nrow)
    M_rows, M_coef, M_ix, M_iy, M_a, M_b = [], [], [], [], [], []
    U_rows, U_coef, U_ip, U_snr = [], [], [], []

    def mono(row, coef, i, j, a, bb):
        M_rows.append(np.broadcast_to(row, np.shape(i)).ravel())
        M_coef.append(np.broadcast_to(coef, np.shape(i)).ravel())
        M_ix.append(np.ravel(i))
        M_iy.append(np.ravel(j))
        M_a.append(np.full(np.size(i), float(a)))
        M_b.append(np.full(np.size(i), float(bb)))

    r = 0
    p0 = x0[ix["p"]]
    if "power" not in prob.fixed and prob.n:
        for k in range(K):
            A[r, ix["p"][:, k]] = prob.fin_weight / (prob.n * c["p_ave"][k])
            b[r] = -1.0
            r += 1
    if "batch" not in prob.fixed:
        for j in range(Gp):
            d0 = x0[ix["Dp"][j]]
            A[r, ix["D"][j]] = 1.0 / c["d_max"]
            A[r, ix["Dp"][j]] = 1.0 / (d0**2 * c["d_max"])
            b[r] = -2.0 / (d0 * c["d_max"])
            r += 1
        for g in range(Gf):
            for k in range(K):
                b0 = x0[ix["Bp"][g, k]]
                A[r, ix["B"][g, k]] = 1.0 / c["b_max"][k]
                A[r, ix["Bp"][g, k]] = 1.0 / (b0**2 * c["b_max"][k])
                b[r] = -2.0 / (b0 * c["b_max"][k])
                r += 1
    tn = c["t_norm"]
    for g in range(Gf):
        for k in range(K):
            A[r, ix["t"][g]] = -1.0 / tn
            b[r] = prob.dl[g, k] / tn
            mono(r, c["a_fin"][k] / tn, ix["fh"][g, k], ix["Bp"][g, k], -1, -1)
            U_rows.append(r)
            U_coef.append(c["bln"][k] / tn)
            U_ip.append(ix["p"][g, k])
            U_snr.append(prob.snr[g, k])
            r += 1
    # delay budget
    A[r, ix["t"]] = prob.fin_weight / c["tau0"]
    b[r] = -1.0
    if Gp:
        mono(r, prob.pre_weight * c["a_pre"] / c["tau0"], ix["f"], ix["Dp"], -1, -1)
    r += 1
    # energy budget, upload energy replaced by its tangent line
    h0 = np.zeros((Gf, K))
    u = np.zeros((Gf, K))
    if Gf:
        L = np.log1p(prob.snr * p0)
        q0 = c["bln"] / L
        h0 = p0 * q0
        u = q0 - p0 * q0 * prob.snr / ((1.0 + prob.snr * p0) * L)
        A[r, ix["p"]] = prob.fin_weight[:, None] * u / c["e0"]
    b[r] = (c["e_dl"] + np.sum(prob.fin_weight[:, None] * (h0 - u * p0))) / c["e0"] - 1.0
    if Gp:
        mono(r, prob.pre_weight * c["e_pre"] / c["e0"], ix["f"], ix["Dp"], 2, -1)
    if Gf:
        mono(r, (prob.fin_weight[:, None] * c["e_fin"][None, :]) / c["e0"], ix["fh"], ix["Bp"], 2, -1)
    r += 1
    assert r == nrow

    cat = lambda L, dt=float: np.concatenate(L).astype(dt) if L else np.zeros(0, dtype=dt)
    monos = (cat(M_rows, int), cat(M_coef), cat(M_ix, int), cat(M_iy, int), cat(M_a), cat(M_b))
    upl = (np.array(U_rows, dtype=int), np.array(U_coef, dtype=float), np.array(U_ip, dtype=int),
           np.array(U_snr, dtype=float))
    return Surrogate(prob, x0.copy(), u, h0, A, b, monos, upl)


class _Scaled:
    """Barrier program over the free variables divided by their scale."""

    def __init__(self, sur: Surrogate):
        prob = sur.problem
        self.sur = sur
        self.fi = np.flatnonzero(prob.free)
        self.s = prob.scale[self.fi]
        self.base = prob.base.copy()
        self.n = self.fi.size
        self.lo = prob.lo[self.fi] / self.s
        self.hi = prob.hi[self.fi] / self.s

    def to_x(self, z):
        x = self.base.copy()
        x[self.fi] = z * self.s
        return x

    def to_z(self, x):
        return x[self.fi] / self.s

    def objective(self, z, order):
        f, g, H = self.sur.objective(self.to_x(z), order)
        if order >= 1:
            g = g[self.fi] * self.s
        if order >= 2:
            H = H[np.ix_(self.fi, self.fi)] * np.outer(self.s, self.s)
        return f, g, H

    def constraints(self, z, order):
        c, J, hess = self.sur.constraints(self.to_x(z), order)
        if order >= 1:
            J = J[:, self.fi] * self.s
        if order >= 2:
            fi, ss = self.fi, np.outer(self.s, self.s)
            inner = hess
            hess = lambda w: inner(w)[np.ix_(fi, fi)] * ss
        return c, J, hess


# -- results ------------------------------------------------------------------------

@dataclass
class SolveResult:
    problem: P2Problem
    x: np.ndarray
    objective: float                    # bound value at x (inf when infeasible)
    status: str                         # "converged" | "infeasible" | "iteration_limit"
    sca_iters: int = 0                  # convex subproblems solved
    newton_iters: int = 0
    kkt_residual: float = float("inf")
    history: list = field(default_factory=list)   # (iteration, bound, max violation)
    phase_one_slack: float | None = None

    @property
    def ok(self) -> bool:
        return self.status != "infeasible"

    def values(self, name):
        return self.problem.values(self.x, name)

    def plan(self) -> Plan:
        return self.problem.to_plan(self.x)

    def max_violation(self) -> float:
        return self.problem.max_violation(self.x)


def _obj_scale(prob, x):
    f = prob.noise_objective(x)[0]
    return f if np.isfinite(f) and f > 0 else 1.0


def solve_convex(sur: Surrogate, start=None, settings=None) -> SolveResult:
    """Solve one convex surrogate.  Phase I runs when ``start`` is not strictly feasible."""
    prob = sur.problem
    st = settings or prob.cfg.solver
    prog = _Scaled(sur)
    x0 = sur.point if start is None else np.asarray(start, dtype=float)
    if prob.static_violations:
        return SolveResult(prob, x0.copy(), float("inf"), "infeasible")
    if prog.n == 0:
        ok = np.all(sur.constraints(x0, 0)[0] <= 0)
        return SolveResult(prob, x0.copy(), prob.upsilon(x0) if ok else float("inf"),
                           "converged" if ok else "infeasible", kkt_residual=0.0)
    z0 = interior(prog.to_z(x0), prog.lo, prog.hi)
    z, status, slack = find_strictly_feasible(prog, z0, max_newton=st.max_newton_iters)
    if status == "infeasible":
        return SolveResult(prob, prog.to_x(z), float("inf"), "infeasible", phase_one_slack=slack)
    res = barrier_solve(prog, z, gap_tol=st.gap_tol, max_newton=st.max_newton_iters,
                        obj_scale=_obj_scale(prob, prog.to_x(z)))
    x = prog.to_x(res.z)
    status = "converged" if res.status == "optimal" and res.kkt_residual <= max(st.tol_kkt, st.gap_tol) \
        else "iteration_limit"
    return SolveResult(prob, x, prob.upsilon(x), status, 1, res.newton_iters, res.kkt_residual,
                       phase_one_slack=slack)


def _feasibility_restore(prob: P2Problem, x, settings, max_rounds=30):
    """SCA on the Phase I problem: re-expand at the least-violating point until it stops improving."""
    best, last, newton = None, np.inf, 0
    for _ in range(max_rounds):
        sur = surrogate_at(prob, x)
        prog = _Scaled(sur)
        z0 = prog.to_z(x)
        z, status, slack = find_strictly_feasible(prog, z0, max_newton=settings.max_newton_iters)
        x = prog.to_x(z)
        if status == "feasible":
            return x, True
        if not slack < last - 1e-9 * max(1.0, abs(last)):
            break
        last = slack
    return x, False


def sca_loop(cfg: ScenarioConfig, m: int, n: int, init=None, fixed=(), collapse: bool = True,
             problem: P2Problem | None = None, trace_path=None) -> SolveResult:
    """Successive convex approximation for the (m, n) cell.

    The sequence of bound values is non-increasing: an iterate that would raise
    the bound is discarded and the loop ends.  Stops when the relative decrease
    falls below ``cfg.solver.epsilon`` or after ``max_sca_iters`` iterations.
    """
    st = cfg.solver
    prob = problem if problem is not None else build_p2(cfg, m, n, fixed, collapse)
    x = initial_point(prob, init)
    lb_delay, lb_energy = prob.budget_lower_bounds()
    if prob.static_violations or lb_delay > cfg.budgets.tau0_s or lb_energy > cfg.budgets.e0_j:
        _write_trace(trace_path, [])
        return SolveResult(prob, x, float("inf"), "infeasible")
    history, newton, best, solves = [], 0, None, 0
    prev = np.inf
    if prob.feasible(x):
        prev = prob.noise_objective(x)[0]
        best = SolveResult(prob, x, prob.upsilon(x), "converged")
    status = "iteration_limit"
    for it in range(1, st.max_sca_iters + 1):
        sur = surrogate_at(prob, x)
        res = solve_convex(sur, settings=st)
        newton += res.newton_iters
        solves += 1
        if res.status == "infeasible" and it == 1 and not np.isfinite(prev):
            xr, ok = _feasibility_restore(prob, res.x, st)
            for cf, pf in _RESTART_MIXES:
                if ok:
                    break
                xr, ok = _feasibility_restore(prob, lean_point(prob, cf, pf), st)
            if ok:
                sur = surrogate_at(prob, xr)
                res = solve_convex(sur, start=xr, settings=st)
                newton += res.newton_iters
                solves += 1
        if res.status == "infeasible":
            if best is None:
                out = SolveResult(prob, res.x, float("inf"), "infeasible", solves, newton, history=history,
                                  phase_one_slack=res.phase_one_slack)
                _write_trace(trace_path, history)
                return out
            status = "converged"
            break
        obj = prob.noise_objective(res.x)[0]
        if np.isfinite(prev) and obj > prev:
            status = "converged"
            break
        history.append((it, prob.upsilon(res.x), prob.max_violation(res.x)))
        dec = (prev - obj) / max(abs(prev), 1e-300) if np.isfinite(prev) else np.inf
        x, best = res.x, res
        prev = obj
        if not np.isfinite(st.epsilon) or prob.objective_is_constant:
            status = "converged"
            break
        if dec < st.epsilon:
            status = "converged"
            break
    _write_trace(trace_path, history)
    return SolveResult(prob, best.x, prob.upsilon(best.x), status, solves, newton,
                       best.kkt_residual, history)


def _write_trace(path, history):
    if path is None:
        return
    with open(Path(path), "w") as fh:
        for it, obj, viol in history:
            fh.write(f"{it},{obj:.17g},{viol:.17g}\n")
