"""Log-barrier interior point method with damped Newton centering.

A *program* is any object exposing

    n, lo, hi                 box bounds (may be +-inf), kept as hard barriers
    objective(z, order)       -> (f, g, H)      (g, H are None below the order)
    constraints(z, order)     -> (c, J, hess)   c_i(z) <= 0, hess(w) = sum w_i d2c_i

The solver never leaves the strict interior.  Phase I relaxes the general
constraints with a shared slack and keeps the box hard.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls


@dataclass
class BarrierResult:
    z: np.ndarray
    status: str          # "optimal" | "infeasible" | "iteration_limit" | "feasible"
    newton_iters: int
    mu: float
    gap: float
    kkt_residual: float
    objective: float


def _box_terms(z, lo, hi, order):
    dl = z - lo
    du = hi - z
    val = -np.sum(np.log(dl[np.isfinite(lo)])) - np.sum(np.log(du[np.isfinite(hi)]))
    if order == 0:
        return val, None, None
    with np.errstate(divide="ignore"):
        il = np.where(np.isfinite(lo), 1.0 / dl, 0.0)
        iu = np.where(np.isfinite(hi), 1.0 / du, 0.0)
    return val, iu - il, il**2 + iu**2


def _inside_box(z, lo, hi):
    return bool(np.all(z > lo) and np.all(z < hi))


def _max_box_step(z, dz, lo, hi, frac=0.99):
    step = 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        neg = dz < 0
        if np.any(neg & np.isfinite(lo)):
            sel = neg & np.isfinite(lo)
            step = min(step, frac * np.min((lo[sel] - z[sel]) / dz[sel]))
        pos = dz > 0
        if np.any(pos & np.isfinite(hi)):
            sel = pos & np.isfinite(hi)
            step = min(step, frac * np.min((hi[sel] - z[sel]) / dz[sel]))
    return step


def _phi(prog, z, t, obj_scale):
    f, _, _ = prog.objective(z, 0)
    c, _, _ = prog.constraints(z, 0)
    if not np.all(np.isfinite(c)) or np.any(c >= 0) or not np.isfinite(f):
        return np.inf, f
    bv, _, _ = _box_terms(z, prog.lo, prog.hi, 0)
    return t * f / obj_scale - np.sum(np.log(-c)) + bv, f


def kkt_residual(prog, z, mu, obj_scale=1.0, active_factor=1e4) -> float:
    """KKT residual (stationarity and complementarity) at a barrier point.

    Near an active constraint the barrier estimate mu / (-c) inherits the
    cancellation error of c, so multipliers of constraints and bounds within
    ``active_factor * mu`` of activity are refitted by non-negative least
    squares.  The rest keep their barrier values.
    """
    _, g0, _ = prog.objective(z, 1)
    c, J, _ = prog.constraints(z, 1)
    n = z.size
    slack = -c
    act = slack <= active_factor * mu
    dlo, dhi = z - prog.lo, prog.hi - z
    blo = dlo <= active_factor * mu
    bhi = dhi <= active_factor * mu
    base = g0 / obj_scale + J[~act].T @ (mu / slack[~act])
    with np.errstate(divide="ignore"):
        base += np.where(~bhi & np.isfinite(dhi), mu / dhi, 0.0) - np.where(~blo & np.isfinite(dlo), mu / dlo, 0.0)
    eye = np.eye(n)
    C = np.hstack([J[act].T, -eye[:, blo], eye[:, bhi]])
    gaps = np.concatenate([slack[act], dlo[blo], dhi[bhi]])
    if C.shape[1]:
        y, _ = nnls(C, -base)
        r = base + C @ y
        comp = float(np.max(y * gaps))
    else:
        r, comp = base, 0.0
    stat = float(np.max(np.abs(r))) if n else 0.0
    return max(stat, comp, float(mu))


def barrier_solve(prog, z0, mu0=1.0, gap_tol=1e-8, newton_tol=1e-12, max_newton=200,
                  obj_scale=1.0, stop=None, certify_infeasible=False) -> BarrierResult:
    """Follow the central path from ``z0`` (strictly feasible) until m*mu <= gap_tol*m.

    ``stop(z, f)`` may end the run early (status "feasible").  With
    ``certify_infeasible`` the run ends as "infeasible" once the duality bound
    proves the optimal value is positive (used by Phase I).
    """
    z = np.array(z0, dtype=float)
    lo, hi = prog.lo, prog.hi
    c, _, _ = prog.constraints(z, 0)
    if not _inside_box(z, lo, hi) or np.any(c >= 0):
        raise ValueError("barrier start is not strictly feasible")
    m_total = c.size + int(np.sum(np.isfinite(lo))) + int(np.sum(np.isfinite(hi)))
    m_total = max(m_total, 1)
    mu = mu0
    total_newton = 0
    status = "iteration_limit"
    while True:
        t = 1.0 / mu
        stalled = False
        for _ in range(max_newton):
            f, g0, H0 = prog.objective(z, 2)
            c, J, hess = prog.constraints(z, 2)
            inv = 1.0 / (-c)
            _, bg, bh = _box_terms(z, lo, hi, 2)
            grad = (t / obj_scale) * g0 + J.T @ inv + bg
            H = (t / obj_scale) * H0 + hess(inv) + (J.T * inv**2) @ J
            H[np.diag_indices_from(H)] += bh
            try:
                dz = np.linalg.solve(H, -grad)
            except np.linalg.LinAlgError:
                dz = np.linalg.lstsq(H, -grad, rcond=None)[0]
            lam2 = float(-grad @ dz)
            total_newton += 1
            if lam2 / 2 <= newton_tol:
                break
            step = _max_box_step(z, dz, lo, hi)
            phi0, _ = _phi(prog, z, t, obj_scale)
            accepted = False
            # quadratic phase: the Armijo test drowns in rounding, accept any non-increase
            slack = 1e-12 * max(1.0, abs(phi0)) if lam2 < 1e-8 else 0.0
            while step > 1e-14:
                zn = z + step * dz
                phin, fn = _phi(prog, zn, t, obj_scale)
                if phin <= phi0 - 0.01 * step * lam2 + slack:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                stalled = True
                break
            z = zn
            if stop is not None and stop(z, fn):
                return BarrierResult(z, "feasible", total_newton, mu, m_total * mu,
                                     kkt_residual(prog, z, mu, obj_scale), fn)
        f, _, _ = prog.objective(z, 0)
        if certify_infeasible and f - m_total * mu * obj_scale > 0:
            status = "infeasible"
            break
        if mu <= gap_tol:
            status = "optimal"
            break
        if stalled and mu < 1e-6:
            # no further progress is representable; the duality bound still holds
            status = "optimal"
            break
        mu /= 10.0
    f, _, _ = prog.objective(z, 0)
    return BarrierResult(z, status, total_newton, mu, m_total * mu, kkt_residual(prog, z, mu, obj_scale), f)


class PhaseOne:
    """min s  s.t.  c_i(z) <= s,  box(z) hard,  s >= s_floor."""

    def __init__(self, prog, s_floor=-1.0):
        self.prog = prog
        self.n = prog.n + 1
        self.lo = np.append(prog.lo, s_floor)
        self.hi = np.append(prog.hi, np.inf)

    def objective(self, y, order):
        g = H = None
        if order >= 1:
            g = np.zeros(self.n)
            g[-1] = 1.0
        if order >= 2:
            H = np.zeros((self.n, self.n))
        return y[-1], g, H

    def constraints(self, y, order):
        c, J, hess = self.prog.constraints(y[:-1], order)
        cs = c - y[-1]
        if order == 0:
            return cs, None, None
        Js = np.hstack([J, -np.ones((J.shape[0], 1))])
        if order == 1:
            return cs, Js, None

        def hs(w):
            H = np.zeros((self.n, self.n))
            H[:-1, :-1] = hess(w)
            return H

        return cs, Js, hs


def find_strictly_feasible(prog, z0, margin=1e-3, gap_tol=1e-10, max_newton=200):
    """Phase I.  Returns (z, status, slack); status is "feasible" or "infeasible".

    ``slack`` is the largest constraint value at the returned point.
    """
    z0 = np.array(z0, dtype=float)
    c, _, _ = prog.constraints(z0, 0)
    if np.all(c < 0):
        return z0, "feasible", float(np.max(c)) if c.size else -np.inf
    s0 = float(np.max(c))
    s0 = s0 + 0.1 * (1.0 + abs(s0))
    p1 = PhaseOne(prog, s_floor=min(-1.0, -2 * margin))
    res = barrier_solve(p1, np.append(z0, s0), gap_tol=gap_tol, max_newton=max_newton,
                        stop=lambda y, f: f < -margin, certify_infeasible=True)
    z = res.z[:-1]
    c, _, _ = prog.constraints(z, 0)
    slack = float(np.max(c))
    if res.status != "infeasible" and slack < 0:
        return z, "feasible", slack
    return z, "infeasible", slack
