"""RBF kernel, biased squared-MMD estimator, and greedy witness scores.

The kernel is ``exp(-gamma * ||x - y||)`` on the *unsquared* Euclidean
distance. Set ``squared=True`` on :class:`KernelParams` for the
conventional ``exp(-gamma * ||x - y||^2)`` variant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist


@dataclass(frozen=True)
class KernelParams:
    gamma: float
    squared: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be a positive finite real, got {self.gamma}")


def _as_points(x, name: str) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    if pts.size and not np.isfinite(pts).all():
        raise ValueError(f"{name} contains non-finite values")
    return pts


def kernel_matrix(x, y, params: KernelParams) -> np.ndarray:
    """Pairwise kernel values between the rows of ``x`` and ``y``."""
    xp = _as_points(x, "x")
    yp = _as_points(y, "y")
    if xp.shape[1] != yp.shape[1]:
        raise ValueError(f"dimension mismatch: {xp.shape[1]} vs {yp.shape[1]}")
    metric = "sqeuclidean" if params.squared else "euclidean"
    return np.exp(-params.gamma * cdist(xp, yp, metric))


def rbf(x, y, params: KernelParams) -> float:
    """Kernel value for a single pair of vectors; lies in (0, 1]."""
    xv = np.asarray(x, dtype=float).ravel()
    yv = np.asarray(y, dtype=float).ravel()
    if xv.shape != yv.shape:
        raise ValueError(f"dimension mismatch: {xv.shape} vs {yv.shape}")
    if not (np.isfinite(xv).all() and np.isfinite(yv).all()):
        raise ValueError("non-finite input")
    d = float(np.linalg.norm(xv - yv))
    if params.squared:
        d = d * d
    return float(np.exp(-params.gamma * d))


def mmd_sq(a, b, params: KernelParams) -> float:
    """Biased V-statistic estimate of the squared MMD between two samples.

    All three double sums include the diagonal self-terms, so the value is
    nonnegative up to rounding and exactly zero for identical samples.
    """
    ap = _as_points(a, "a")
    bp = _as_points(b, "b")
    if ap.shape[0] == 0 or bp.shape[0] == 0:
        raise ValueError("mmd_sq requires nonempty sample sets")
    kaa = float(kernel_matrix(ap, ap, params).mean())
    kbb = float(kernel_matrix(bp, bp, params).mean())
    kab = float(kernel_matrix(ap, bp, params).mean())
    return kaa + kbb - 2.0 * kab


def j_mmd(v, sub, old, params: KernelParams) -> float:
    """Greedy witness score of candidate ``v`` against the growing subset.

    ``(2/|sub|) sum_{u in sub} k(v,u) - (2/|old|) sum_{u in old} k(v,u)``;
    the first term is defined as 0 when the subset is still empty, which
    makes the first greedy pick the kernel-herding step.
    """
    old_pts = _as_points(old, "old")
    if old_pts.shape[0] == 0:
        raise ValueError("j_mmd requires a nonempty reference set")
    vv = np.asarray(v, dtype=float).reshape(1, -1)
    term_old = 2.0 * float(kernel_matrix(vv, old_pts, params).mean())
    sub_pts = np.asarray(sub, dtype=float)
    if sub_pts.size == 0:
        term_sub = 0.0
    else:
        term_sub = 2.0 * float(kernel_matrix(vv, _as_points(sub, "sub"), params).mean())
    return term_sub - term_old


@dataclass(frozen=True)
class KernelBoundReport:
    """Result of the sufficient-condition check for diminishing returns."""

    max_offdiag: float
    bound: float
    satisfied: bool


def kernel_bound_check(embeddings, params: KernelParams, n_ref: int) -> KernelBoundReport:
    """Check ``max k(v,u) <= 1 / (n^3 - 2n^2 - 2n - 3)`` over distinct pairs.

    The bound is the sufficient condition under which greedy selection on
    the squared-MMD objective enjoys diminishing returns. It is advisory:
    selection proceeds regardless of the outcome, because for realistic
    ``n`` the bound forces a nearly degenerate kernel.
    """
    denom = n_ref**3 - 2 * n_ref**2 - 2 * n_ref - 3
    if denom <= 0:
        raise ValueError(f"n_ref={n_ref} gives nonpositive bound denominator {denom}; need n_ref >= 4")
    bound = 1.0 / denom
    pts = _as_points(embeddings, "embeddings")
    if pts.shape[0] < 2:
        max_offdiag = 0.0
    else:
        k = kernel_matrix(pts, pts, params)
        np.fill_diagonal(k, -np.inf)
        max_offdiag = float(k.max())
    return KernelBoundReport(max_offdiag=max_offdiag, bound=bound, satisfied=max_offdiag <= bound)


def median_heuristic_gamma(
    embeddings,
    seed: int = 0,
    sample_cap: int = 1000,
    squared: bool = False,
) -> KernelParams:
    """Bandwidth rule: gamma = 1 / median pairwise distance.

    At most ``sample_cap`` points are used (seeded subsample), so the rule
    stays cheap on large sets and is deterministic given the seed. Falls
    back to gamma = 1 when all sampled points coincide.
    """
    pts = _as_points(embeddings, "embeddings")
    if pts.shape[0] < 2:
        raise ValueError("median heuristic needs at least two points")
    if pts.shape[0] > sample_cap:
        rng = np.random.default_rng(seed)
        idx = rng.choice(pts.shape[0], size=sample_cap, replace=False)
        pts = pts[np.sort(idx)]
    med = float(np.median(pdist(pts)))
    gamma = 1.0 / med if med > 0 else 1.0
    return KernelParams(gamma=gamma, squared=squared)
