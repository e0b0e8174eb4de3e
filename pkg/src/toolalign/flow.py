"""Rigid transforms from per-point flow, and pose-trajectory matching error."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import RigidTransform, as_cloud


class DegenerateFitError(ValueError):
    """The base points do not pin down a rotation (coincident or collinear)."""


# Relative singular-value threshold below which the base is treated as collinear.
COLLINEAR_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PointFlow:
    """Per-point displacement ``flow[i]`` of ``base[i]``."""

    base: np.ndarray
    flow: np.ndarray

    def __post_init__(self):
        base = as_cloud(self.base, "base")
        flow = np.asarray(self.flow, dtype=np.float64)
        if flow.shape != base.shape:
            raise ValueError(f"flow shape {flow.shape} does not match base shape {base.shape}")
        if not np.all(np.isfinite(flow)):
            raise ValueError("flow contains non-finite values")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "flow", flow)

    @classmethod
    def between(cls, base, moved) -> PointFlow:
        base = as_cloud(base, "base")
        return cls(base, as_cloud(moved, "moved") - base)

    @property
    def target(self) -> np.ndarray:
        return self.base + self.flow


def rigid_fit(pf: PointFlow) -> RigidTransform:
    """Least-squares rigid transform carrying ``base`` onto ``base + flow``.

    Kabsch: align centroids, SVD of the 3x3 cross-covariance, and flip the
    last singular direction when the raw solution would be a reflection.
    """
    P = pf.base
    Q = pf.target
    if len(P) < 3:
        raise DegenerateFitError("need at least 3 points")
    cp = P.mean(axis=0)
    cq = Q.mean(axis=0)
    Pc = P - cp
    Qc = Q - cq
    # collinearity is a property of the base alone
    sv = np.linalg.svd(Pc, compute_uv=False)
    if sv[0] <= 0 or sv[1] <= COLLINEAR_TOL * sv[0]:
        raise DegenerateFitError("base points are coincident or collinear")
    H = Pc.T @ Qc
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = cq - R @ cp
    return RigidTransform.from_matrix(R, t)


def fit_residual(pf: PointFlow, T: RigidTransform) -> float:
    """Sum of squared residuals of ``T`` against the flow targets."""
    return float(np.sum((T.apply(pf.base) - pf.target) ** 2))


def flow_matching_error(predicted: Sequence[RigidTransform], reference: Sequence[RigidTransform], tool) -> float:
    """Mean squared distance between tool points under two pose sequences.

    The mean runs over every timestep and every tool point. Poses are
    absolute, so callers pass chained poses rather than deltas.
    """
    tool = as_cloud(tool, "tool")
    if len(predicted) != len(reference):
        raise ValueError(f"horizon mismatch: {len(predicted)} vs {len(reference)} poses")
    if len(predicted) == 0:
        raise ValueError("pose trajectories are empty")
    total = 0.0
    for a, b in zip(predicted, reference):
        diff = a.apply(tool) - b.apply(tool)
        total += float(np.mean(np.sum(diff * diff, axis=1)))
    return total / len(predicted)
