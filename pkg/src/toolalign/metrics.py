"""Point-set distances: Chamfer, debiased Sinkhorn divergence, normalized score."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .geometry import as_cloud

# Above this many target points nearest-neighbor queries go through a k-d tree.
BRUTE_FORCE_MAX = 64
_BRUTE_CHUNK = 2048


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Shared by both nearest-neighbor paths so their results agree bit-for-bit.
    dx = a[..., 0] - b[..., 0]
    dy = a[..., 1] - b[..., 1]
    dz = a[..., 2] - b[..., 2]
    return dx * dx + dy * dy + dz * dz


def nearest_brute(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive nearest neighbor of every ``src`` point in ``dst``.

    Returns ``(indices, squared_distances)``; ties go to the lowest index.
    """
    idx = np.empty(len(src), dtype=np.intp)
    d2 = np.empty(len(src))
    for lo in range(0, len(src), _BRUTE_CHUNK):
        block = src[lo : lo + _BRUTE_CHUNK]
        D = _sqdist(block[:, None, :], dst[None, :, :])
        j = np.argmin(D, axis=1)
        idx[lo : lo + len(block)] = j
        d2[lo : lo + len(block)] = D[np.arange(len(block)), j]
    return idx, d2


class NeighborIndex:
    """Nearest-neighbor lookup into a fixed target cloud.

    Brute force for small targets, a k-d tree otherwise. Both paths report
    squared distances through the same arithmetic.
    """

    def __init__(self, points):
        self.points = as_cloud(points)
        self._tree = cKDTree(self.points) if len(self.points) > BRUTE_FORCE_MAX else None

    def __len__(self):
        return len(self.points)

    def query(self, src: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self._tree is None:
            return nearest_brute(src, self.points)
        # Two candidates guard against the tree and _sqdist disagreeing in the last ulp.
        _, cand = self._tree.query(src, k=2)
        d2 = _sqdist(src[:, None, :], self.points[cand])
        pick = np.argmin(d2, axis=1)
        rows = np.arange(len(src))
        tie = (d2[:, 0] == d2[:, 1]) & (cand[:, 1] < cand[:, 0])
        pick[tie] = 1
        return cand[rows, pick], d2[rows, pick]


def nearest(src, dst) -> tuple[np.ndarray, np.ndarray]:
    return NeighborIndex(dst).query(as_cloud(src))


def chamfer(A, B) -> float:
    """Symmetric Chamfer distance with squared distances and per-cloud means.

    ``mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2``, in squared meters.
    """
    A = as_cloud(A, "A")
    B = as_cloud(B, "B")
    _, dab = NeighborIndex(B).query(A)
    _, dba = NeighborIndex(A).query(B)
    return float(np.mean(dab) + np.mean(dba))


def chamfer_brute(A, B) -> float:
    A = as_cloud(A, "A")
    B = as_cloud(B, "B")
    _, dab = nearest_brute(A, B)
    _, dba = nearest_brute(B, A)
    return float(np.mean(dab) + np.mean(dba))


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 1e-3
    max_iterations: int = 500
    tolerance: float = 1e-9

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if int(self.max_iterations) < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


class SinkhornResult(NamedTuple):
    value: float
    converged: bool
    iterations: int


def _log_sinkhorn(C: np.ndarray, cfg: SinkhornConfig, symmetric: bool) -> SinkhornResult:
    """Entropic OT cost between uniform measures for cost matrix ``C``.

    Returns the dual objective ``<a, f> + <b, g>``, which equals the primal
    ``<P, C> + eps * KL(P | a x b)`` at the fixed point.
    """
    n, m = C.shape
    eps = cfg.epsilon
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)
    converged = False
    it = 0
    for it in range(1, int(cfg.max_iterations) + 1):
        if symmetric:
            # averaged updates converge much faster for OT(A, A)
            f_new = 0.5 * (f - eps * logsumexp(log_a[None, :] + (f[None, :] - C) / eps, axis=1))
            change = np.max(np.abs(f_new - f))
            f = g = f_new
        else:
            f_new = -eps * logsumexp(log_b[None, :] + (g[None, :] - C) / eps, axis=1)
            g_new = -eps * logsumexp(log_a[:, None] + (f_new[:, None] - C) / eps, axis=0)
            change = max(np.max(np.abs(f_new - f)), np.max(np.abs(g_new - g)))
            f, g = f_new, g_new
        if change < cfg.tolerance:
            converged = True
            break
    return SinkhornResult(float(np.mean(f) + np.mean(g)), converged, it)


def entropic_ot(A, B, cfg: SinkhornConfig = SinkhornConfig()) -> SinkhornResult:
    A = as_cloud(A, "A")
    B = as_cloud(B, "B")
    C = _sqdist(A[:, None, :], B[None, :, :])
    return _log_sinkhorn(C, cfg, symmetric=False)


def _self_ot(A: np.ndarray, cfg: SinkhornConfig) -> SinkhornResult:
    C = _sqdist(A[:, None, :], A[None, :, :])
    return _log_sinkhorn(C, cfg, symmetric=True)


def sinkhorn_divergence(A, B, cfg: SinkhornConfig = SinkhornConfig()) -> SinkhornResult:
    """Debiased entropic OT: ``OT(A,B) - OT(A,A)/2 - OT(B,B)/2``.

    Uniform weights, squared-Euclidean cost, log-domain iterations. A run that
    hits ``max_iterations`` still returns its last value with ``converged=False``.
    """
    A = as_cloud(A, "A")
    B = as_cloud(B, "B")
    aa = _self_ot(A, cfg)
    if A.shape == B.shape and np.array_equal(A, B):
        ab = bb = aa
    else:
        ab = entropic_ot(A, B, cfg)
        bb = _self_ot(B, cfg)
    value = ab.value - 0.5 * aa.value - 0.5 * bb.value
    return SinkhornResult(
        float(value),
        ab.converged and aa.converged and bb.converged,
        max(ab.iterations, aa.iterations, bb.iterations),
    )


def normalized_score(s_0: float, s_H: float) -> float:
    """Fractional decrease ``(s_0 - s_H) / s_0``; negative when things got worse."""
    if not s_0 > 0:
        raise ValueError(f"initial distance must be positive, got {s_0!r}")
    return (s_0 - s_H) / s_0
