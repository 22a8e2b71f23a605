"""Average squared gradient norm bound and empirical Wasserstein distances."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .config_model import LearningProfile


@dataclass(frozen=True)
class BoundBreakdown:
    lambda_: float
    omega: float
    noise_term: float
    shift_term: float
    init_term: float
    upsilon: float
    rounds: int


def noise_sums(d_batch, b_batch) -> tuple[float, float]:
    """Lambda = sum 1/D over pre-training rounds, Omega = sum 1/B_tot over fine-tuning rounds."""
    d = np.asarray(d_batch, dtype=float).ravel()
    b = np.asarray(b_batch, dtype=float)
    if b.size and b.ndim == 1:
        b = b.reshape(-1, 1)
    if np.any(d < 1) or (b.size and np.any(b < 1)):
        raise ValueError("every active round needs a batch of at least 1")
    lam = float(np.sum(1.0 / d)) if d.size else 0.0
    omega = float(np.sum(1.0 / b.sum(axis=0))) if b.size else 0.0
    return lam, omega


def convergence_bound(learning: LearningProfile, K: int, d_batch, b_batch) -> BoundBreakdown:
    """Upper bound on the average squared gradient norm after M + N rounds.

    ``b_batch`` is K x N.  Without pre-training rounds (M = 0) the distribution
    shift term is dropped: there is no pre-trained model to transfer.
    """
    m = int(np.size(d_batch))
    b = np.asarray(b_batch, dtype=float)
    n = int(b.shape[1]) if b.ndim == 2 else (1 if b.size else 0)
    total = m + n
    if total == 0:
        raise ValueError("bound undefined for M + N = 0")
    lam, omega = noise_sums(d_batch, b)
    g = learning.gamma
    noise = g * (learning.rho * learning.alpha**2 * lam + learning.rho_hat * learning.alpha_hat**2 * K * omega) / total
    shift = 2.0 * learning.shift / (total * g) if m > 0 else 0.0
    init = 2.0 * learning.loss_gap / (total * g)
    return BoundBreakdown(lam, omega, noise, shift, init, noise + shift + init, total)


def asymptotic_limit(learning: LearningProfile, K: int, b_tot: float) -> float:
    """Limit of the bound as N grows with a fixed per-round total fine-tuning batch."""
    if b_tot < 1:
        raise ValueError("b_tot must be >= 1")
    return learning.gamma * learning.rho_hat * learning.alpha_hat**2 * K / b_tot


# -- Wasserstein-1 ---------------------------------------------------------------

def wasserstein_1d(a, b) -> float:
    """Exact W1 between two empirical measures on the line.

    Equal sizes reduce to the mean absolute difference of the order statistics.
    Unequal sizes integrate |F_a^-1 - F_b^-1| over the merged quantile grid.
    """
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    qa = np.arange(1, a.size + 1) / a.size
    qb = np.arange(1, b.size + 1) / b.size
    cuts = np.union1d(qa, qb)
    widths = np.diff(np.concatenate(([0.0], cuts)))
    mids = cuts - widths / 2
    ia = np.minimum(np.searchsorted(qa, mids), a.size - 1)
    ib = np.minimum(np.searchsorted(qb, mids), b.size - 1)
    return float(np.sum(widths * np.abs(a[ia] - b[ib])))


_EXACT_LIMIT = 64


def wasserstein_exact_small(a, b) -> float:
    """Exact empirical W1 in R^d by minimum-cost perfect matching (n <= 64)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] == 0:
        raise ValueError("empty sample")
    if a.shape != b.shape:
        raise ValueError(f"need equal counts and dimension, got {a.shape} and {b.shape}")
    if a.shape[0] > _EXACT_LIMIT:
        raise ValueError(f"exact matcher limited to {_EXACT_LIMIT} points, got {a.shape[0]}")
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / a.shape[0])


def load_samples(path) -> np.ndarray:
    """One vector per line, whitespace-separated decimals."""
    arr = np.loadtxt(Path(path), ndmin=2)
    if arr.size == 0:
        raise ValueError(f"{path}: no samples")
    return arr


def wasserstein(a, b) -> float:
    """Dispatch: sorted-sample route in 1-d, exact matching otherwise."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    one_d = (a.ndim == 1 or a.shape[1] == 1) and (b.ndim == 1 or b.shape[1] == 1)
    if one_d:
        return wasserstein_1d(a, b)
    return wasserstein_exact_small(a, b)

