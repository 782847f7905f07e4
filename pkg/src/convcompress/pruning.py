"""Input-channel pruning: lasso selection with least-squares refit,
plus a data-free magnitude baseline.

The lasso path follows the two-step scheme: per-channel response features
are built from Frobenius-normalized kernel slices, a coordinate-descent
lasso picks the surviving channels (the penalty is searched upward until
the sparsity target holds, then bisected down to the smallest feasible
value), and the kept channels are refit by ordinary least squares.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .kernel import Array, Kernel4D


@dataclass(frozen=True)
class PruneResult:
    """Outcome of pruning input channels of one layer.

    ``beta`` has one entry per original channel, zero exactly on the
    dropped ones (surviving scales are absorbed into the refit weights, so
    kept entries are 1).  ``refit_kernel`` has ``len(kept)`` input channels.
    For the magnitude baseline ``residual`` is the weight norm removed;
    for the lasso path it is the response reconstruction error.
    """

    beta: Array
    kept: tuple[int, ...]
    refit_kernel: Kernel4D
    residual: float

    @property
    def s_prime(self) -> int:
        return len(self.kept)


def _channel_features(x: Array, kernel: Kernel4D) -> Array:
    """Per-channel response features: column i is vec(X_i @ Wn_i^T).

    Kernel slices are Frobenius-normalized; all-zero slices give an
    all-zero column (the lasso then never selects that channel).
    """
    n = x.shape[0]
    t, s, k = kernel.t, kernel.s, kernel.k
    cols = np.zeros((n * t, s))
    for i in range(s):
        wi = kernel.data[:, i].reshape(t, k * k)
        norm = np.linalg.norm(wi)
        if norm == 0.0:
            continue
        cols[:, i] = (x[:, i] @ (wi / norm).T).ravel()
    return cols


def channel_prune(
    kernel: Kernel4D,
    x: Array,
    y: Array,
    s_prime: int,
    lambda_init: float = 1e-4,
) -> PruneResult:
    """Select ``s_prime`` input channels by lasso and refit the kept ones.

    ``x`` is (n, s, k*k): per-sample, per-channel flattened patches;
    ``y`` is the (n, t) response matrix of the uncompressed layer.
    The penalty search starts at ``lambda_init``, doubles until at most
    ``s_prime`` coefficients survive, then bisects 20 steps to the smallest
    feasible penalty.  Returns after the least-squares refit.
    """
    t, s, k = kernel.t, kernel.s, kernel.k
    if not 1 <= s_prime < s:
        raise ValueError(f"s_prime must be in [1, {s - 1}], got {s_prime}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != s or x.shape[2] != k * k:
        raise ValueError(f"x must be (n, {s}, {k * k}), got {x.shape}")
    if y.shape != (x.shape[0], t):
        raise ValueError(f"y must be ({x.shape[0]}, {t}), got {y.shape}")
    if not np.any(x):
        raise ValueError("input patches are all zero")
    if lambda_init <= 0:
        raise ValueError("lambda_init must be positive")

    feats = _channel_features(x, kernel)
    target = y.ravel()

    def solve(lam: float) -> Array:
        return linalg.lasso_cd(feats, target, lam)

    lam = lambda_init
    beta = solve(lam)
    if np.count_nonzero(beta) > s_prime:
        lo = lam
        for _ in range(200):
            lam *= 2.0
            beta = solve(lam)
            if np.count_nonzero(beta) <= s_prime:
                break
            lo = lam
        else:
            raise RuntimeError("lasso penalty search failed to reach the sparsity target")
        hi = lam
        best = beta
        for _ in range(20):
            mid = 0.5 * (lo + hi)
            beta_mid = solve(mid)
            if np.count_nonzero(beta_mid) <= s_prime:
                hi, best = mid, beta_mid
            else:
                lo = mid
        beta = best
    kept = tuple(int(i) for i in np.flatnonzero(beta))
    if not kept:
        raise RuntimeError("lasso removed every channel; lower lambda_init or raise s_prime")

    design = x[:, kept, :].reshape(x.shape[0], len(kept) * k * k)
    try:
        refit = linalg.ridge_solve(y.T, design.T, eps=0.0)  # (t, len(kept)*k*k)
    except ValueError:
        refit = linalg.ridge_solve(y.T, design.T)  # degenerate design: tiny ridge
    refit_kernel = Kernel4D(refit.reshape(t, len(kept), k, k), bias=kernel.bias)
    residual = float(np.linalg.norm(y - design @ refit.T))
    beta_out = np.zeros(s)
    beta_out[list(kept)] = 1.0
    return PruneResult(beta=beta_out, kept=kept, refit_kernel=refit_kernel, residual=residual)


def magnitude_prune(kernel: Kernel4D, s_prime: int) -> PruneResult:
    """Keep the ``s_prime`` input channels with largest Frobenius norm.

    No data, no refit; ties break toward the lower channel index.
    ``residual`` is the Frobenius norm of the removed weights.
    """
    s = kernel.s
    if not 1 <= s_prime <= s:
        raise ValueError(f"s_prime must be in [1, {s}], got {s_prime}")
    norms = np.linalg.norm(kernel.data.reshape(kernel.t, s, -1), axis=(0, 2))
    order = sorted(range(s), key=lambda i: (-norms[i], i))
    kept = tuple(sorted(order[:s_prime]))
    dropped = [i for i in range(s) if i not in kept]
    residual = float(np.sqrt(np.sum(norms[dropped] ** 2))) if dropped else 0.0
    beta = np.zeros(s)
    beta[list(kept)] = 1.0
    refit_kernel = Kernel4D(kernel.data[:, list(kept)].copy(), bias=kernel.bias)
    return PruneResult(beta=beta, kept=kept, refit_kernel=refit_kernel, residual=residual)
