"""Sequential pose optimization of a real tool against a generated trajectory.

Stage one searches for the reset transform with multi-start projected gradient
descent over (unit quaternion, translation) on::

    chamfer(T o tool, gen_0) - lambda_c * chamfer(T o tool, obs)

Stage two starts every per-step delta at identity and descends jointly over all
Euler-angle deltas on::

    sum_t chamfer(T_t o X_{t-1} o tool, gen_t) + lambda_r * (|trans_t| + |euler_t|)

with ``X_{t-1} = T_{t-1} o ... o T_1 o T_0``.

Chamfer gradients freeze the nearest-neighbor correspondences at the current
iterate. A step is accepted only if it does not increase the frozen objective,
halving the step until it does; accepted steps let the next trial step double. A frozen Chamfer term upper-bounds the true
one and matches it at the freeze point, so the true objective never rises.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    EulerDelta,
    RigidTransform,
    as_cloud,
    euler_matrix,
    euler_matrix_jacobian,
    quat_matrix_jacobian,
    quat_to_matrix,
    random_rotation,
)
from .metrics import chamfer

logger = logging.getLogger(__name__)

STEP_FLOOR = 1e-8
CONVERGENCE_TOL = 1e-8
CONVERGENCE_WINDOW = 10
INIT_BOX_MARGIN = 0.2
STEP_GROWTH = 2.0


class OptimizationFailed(RuntimeError):
    """Raised when no usable iterate could be produced.

    ``diagnostics`` holds one dict per initialization or stage.
    """

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


@dataclass(frozen=True)
class OptimizerConfig:
    lambda_c: float = 0.1
    lambda_r: float = 0.1
    reset_step_size: float = 1e-2
    delta_step_size: float = 1e-3
    num_inits: int = 32
    reset_iterations: int = 300
    delta_iterations: int = 500
    # ((lo_x, lo_y, lo_z), (hi_x, hi_y, hi_z)); None derives a box from gen_0 and obs
    init_translation_bounds: tuple | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if not (self.lambda_c >= 0 and self.lambda_r >= 0):
            raise ValueError("lambda_c and lambda_r must be non-negative")
        if not (self.reset_step_size > 0 and self.delta_step_size > 0):
            raise ValueError("step sizes must be positive")
        if int(self.num_inits) < 1:
            raise ValueError("num_inits must be >= 1")
        if int(self.reset_iterations) < 1 or int(self.delta_iterations) < 0:
            raise ValueError("iteration counts out of range")
        if self.init_translation_bounds is not None:
            lo, hi = (np.asarray(b, dtype=float).reshape(3) for b in self.init_translation_bounds)
            if not np.all(hi > lo):
                raise ValueError("init_translation_bounds must be a non-degenerate box")
            object.__setattr__(self, "init_translation_bounds", (tuple(lo.tolist()), tuple(hi.tolist())))

    def replace(self, **changes) -> OptimizerConfig:
        return replace(self, **changes)


@dataclass(frozen=True)
class ResetResult:
    transform: RigidTransform
    cost: float
    init_index: int
    converged: bool
    # final cost per init in init order; inf marks an init that failed
    init_costs: tuple = ()


@dataclass(frozen=True)
class DeltaResult:
    deltas: list
    cost: float
    per_step_residuals: list
    initial_cost: float = math.nan
    iterations: int = 0
    converged: bool = False

    def transforms(self) -> list[RigidTransform]:
        return [d.to_transform() for d in self.deltas]


# --------------------------------------------------------------------------
# Frozen-correspondence Chamfer pieces


class _Target:
    """A static cloud with its k-d tree."""

    __slots__ = ("points", "tree")

    def __init__(self, points):
        self.points = as_cloud(points)
        self.tree = cKDTree(self.points)


@dataclass
class _Match:
    fwd: np.ndarray  # moving point i -> nearest target index
    bwd: np.ndarray  # target point j -> nearest moving index


def _match(X: np.ndarray, target: _Target, body: _Target, R: np.ndarray, t: np.ndarray) -> _Match:
    """Correspondences for ``X = body @ R.T + t`` against ``target``.

    The reverse lookup maps the target into the body frame, which keeps the
    body tree fixed across iterations; rigid motions preserve distances.
    """
    _, fwd = target.tree.query(X)
    _, bwd = body.tree.query((target.points - t) @ R)
    # with overflowing coordinates the tree reports "no neighbor" as index n;
    # any valid index keeps the cost non-finite so the caller rejects it
    return _Match(np.minimum(fwd, len(target.points) - 1), np.minimum(bwd, len(body.points) - 1))


def _frozen_value(X: np.ndarray, G: np.ndarray, m: _Match) -> float:
    d1 = X - G[m.fwd]
    d2 = X[m.bwd] - G
    return float(np.einsum("ij,ij->", d1, d1) / len(X) + np.einsum("ij,ij->", d2, d2) / len(G))


def _frozen_grad(X: np.ndarray, G: np.ndarray, m: _Match) -> np.ndarray:
    grad = (2.0 / len(X)) * (X - G[m.fwd])
    np.add.at(grad, m.bwd, (2.0 / len(G)) * (X[m.bwd] - G))
    return grad


def _as_target(P, name) -> _Target:
    return P if isinstance(P, _Target) else _Target(as_cloud(P, name))


# --------------------------------------------------------------------------
# Reset objective


def _unit(q: np.ndarray) -> np.ndarray:
    # plain normalization, no sign canonicalization, so q -> q/|q| stays smooth
    return q / np.linalg.norm(q)


def _reset_eval(q, t, body: _Target, gen0: _Target, obs: _Target, lambda_c, matches=None):
    R = quat_to_matrix(_unit(q))
    X = body.points @ R.T + t
    if matches is None:
        matches = (_match(X, gen0, body, R, t), _match(X, obs, body, R, t) if lambda_c else None)
    value = _frozen_value(X, gen0.points, matches[0])
    if lambda_c:
        value -= lambda_c * _frozen_value(X, obs.points, matches[1])
    return X, value, matches


def _reset_grad(q, X, body: _Target, gen0: _Target, obs: _Target, lambda_c, matches):
    gX = _frozen_grad(X, gen0.points, matches[0])
    if lambda_c:
        gX -= lambda_c * _frozen_grad(X, obs.points, matches[1])
    g_t = gX.sum(axis=0)
    nq = np.linalg.norm(q)
    u = q / nq
    g_u = np.einsum("kab,ab->k", quat_matrix_jacobian(u), gX.T @ body.points)
    g_q = (g_u - u * (u @ g_u)) / nq
    return g_q, g_t


def reset_objective(T: RigidTransform, tool, gen0, obs, lambda_c: float) -> float:
    """``chamfer(T o tool, gen0) - lambda_c * chamfer(T o tool, obs)``."""
    X = T.apply(as_cloud(tool, "tool"))
    value = chamfer(X, as_cloud(gen0, "gen0"))
    obs = as_cloud(obs, "obs")
    if lambda_c:
        value -= lambda_c * chamfer(X, obs)
    return value


def reset_objective_grad(q, t, tool, gen0, obs, lambda_c: float, frozen=None):
    """Reset objective and its gradient w.r.t. a raw quaternion and translation.

    The rotation is ``R(q / |q|)``, so ``q`` may have any nonzero norm and its
    gradient is tangent to the sphere through ``q``. Pass the ``matches`` from
    an earlier call as ``frozen`` to evaluate with those correspondences held
    fixed.

    Returns:
        ``(value, grad_q, grad_t, matches)``.
    """
    body = _as_target(tool, "tool")
    gen0 = _as_target(gen0, "gen0")
    obs = _as_target(obs, "obs")
    q = np.asarray(q, dtype=float).reshape(4)
    t = np.asarray(t, dtype=float).reshape(3)
    X, value, matches = _reset_eval(q, t, body, gen0, obs, lambda_c, frozen)
    g_q, g_t = _reset_grad(q, X, body, gen0, obs, lambda_c, matches)
    return value, g_q, g_t, matches


# --------------------------------------------------------------------------
# Delta objective


def _safe_unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.zeros_like(v)


def _delta_regularizer(params: np.ndarray, lambda_r: float) -> float:
    if not lambda_r:
        return 0.0
    norms = np.linalg.norm(params[:, 3:], axis=1) + np.linalg.norm(params[:, :3], axis=1)
    return float(lambda_r * norms.sum())


class _Chain:
    """Forward pass of the delta chain starting from the tool in reset pose."""

    def __init__(self, params: np.ndarray, body: _Target, T0: RigidTransform):
        self.params = params
        R_cum = T0.matrix
        t_cum = T0.translation.copy()
        self.Rs = []
        self.cum = []  # absolute (R, t) of frames 1..H
        self.Ys = [body.points @ R_cum.T + t_cum]
        for k in range(len(params)):
            R = euler_matrix(params[k, :3])
            R_cum = R @ R_cum
            t_cum = R @ t_cum + params[k, 3:]
            self.Rs.append(R)
            self.cum.append((R_cum, t_cum))
            self.Ys.append(self.Ys[-1] @ R.T + params[k, 3:])


def _delta_eval(params, body, T0, targets, lambda_r, matches=None):
    chain = _Chain(params, body, T0)
    if matches is None:
        matches = [_match(chain.Ys[k + 1], targets[k], body, *chain.cum[k]) for k in range(len(params))]
    residuals = [_frozen_value(chain.Ys[k + 1], targets[k].points, matches[k]) for k in range(len(params))]
    value = float(sum(residuals)) + _delta_regularizer(params, lambda_r)
    return chain, value, residuals, matches


def _delta_grad(chain: _Chain, targets, lambda_r, matches) -> np.ndarray:
    params = chain.params
    grad = np.zeros_like(params)
    adj = None  # dJ/dY_k summed over frame k and every later frame
    for k in range(len(params) - 1, -1, -1):
        local = _frozen_grad(chain.Ys[k + 1], targets[k].points, matches[k])
        adj = local if adj is None else local + adj @ chain.Rs[k + 1]
        grad[k, 3:] = adj.sum(axis=0)
        grad[k, :3] = np.einsum("kab,ab->k", euler_matrix_jacobian(params[k, :3]), adj.T @ chain.Ys[k])
        if lambda_r:
            grad[k, 3:] += lambda_r * _safe_unit(params[k, 3:])
            grad[k, :3] += lambda_r * _safe_unit(params[k, :3])
    return grad


def _deltas_to_params(deltas) -> np.ndarray:
    rows = [d.as_vector() if isinstance(d, EulerDelta) else np.asarray(d, dtype=float).reshape(6) for d in deltas]
    return np.asarray(rows, dtype=float).reshape(len(rows), 6)


def _check_horizon(n_deltas: int, gen) -> None:
    if len(gen) < 2:
        raise ValueError("generated trajectory needs at least frames 0 and 1")
    if n_deltas != len(gen) - 1:
        raise ValueError(f"expected {len(gen) - 1} deltas for {len(gen)} frames, got {n_deltas}")


def delta_objective(deltas, T0: RigidTransform, tool, gen, lambda_r: float) -> float:
    """Summed per-step Chamfer plus ``lambda_r * (|translation| + |euler|)`` per step.

    ``gen`` holds frames ``0..H``; frame 0 is the reset target and is excluded.
    """
    _check_horizon(len(deltas), gen)
    params = _deltas_to_params(deltas)
    body = as_cloud(tool, "tool")
    total = _delta_regularizer(params, lambda_r)
    X = T0
    for k, d in enumerate(params):
        X = EulerDelta.from_vector(d).to_transform().compose(X)
        total += chamfer(X.apply(body), as_cloud(gen[k + 1], "gen frame"))
    return total


def delta_objective_grad(params, T0: RigidTransform, tool, gen, lambda_r: float, frozen=None):
    """Delta objective and its ``(H, 6)`` gradient over ``(alpha, beta, gamma, tx, ty, tz)`` rows.

    The norm penalties contribute the zero subgradient at the origin.

    Returns:
        ``(value, grad, matches)``.
    """
    params = np.asarray(params, dtype=float).reshape(-1, 6)
    _check_horizon(len(params), gen)
    body = _as_target(tool, "tool")
    targets = [_as_target(g, "gen frame") for g in gen[1:]]
    chain, value, _, matches = _delta_eval(params, body, T0, targets, lambda_r, frozen)
    return value, _delta_grad(chain, targets, lambda_r, matches), matches


# --------------------------------------------------------------------------
# Stage 1: reset transform


@dataclass
class _InitRun:
    index: int
    q: np.ndarray
    t: np.ndarray
    cost: float
    converged: bool
    iterations: int
    error: str | None = None


def _converged(history: list) -> bool:
    return len(history) > CONVERGENCE_WINDOW and abs(history[-1 - CONVERGENCE_WINDOW] - history[-1]) < CONVERGENCE_TOL


def init_translation_box(gen0, obs, margin: float = INIT_BOX_MARGIN):
    both = np.concatenate([as_cloud(gen0), as_cloud(obs)])
    return both.min(axis=0) - margin, both.max(axis=0) + margin


def init_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for init ``index``; unaffected by execution order."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)])


def _descend_reset(index, q, t, body, gen0, obs, cfg: OptimizerConfig, rot_gain, iterations) -> _InitRun:
    lam = cfg.lambda_c
    q = np.asarray(q, dtype=float)
    t = np.asarray(t, dtype=float)
    value, gq, gt, m = reset_objective_grad(q, t, body, gen0, obs, lam)
    if not np.isfinite(value):
        return _InitRun(index, q, t, math.inf, False, 0, "non-finite initial cost")
    history = [value]
    step = cfg.reset_step_size
    for it in range(1, iterations + 1):
        s = step
        frozen = math.nan
        while s >= STEP_FLOOR:
            q_new = _unit(q - s * rot_gain * gq)
            t_new = t - s * gt
            _, frozen, _ = _reset_eval(q_new, t_new, body, gen0, obs, lam, m)
            if np.isfinite(frozen) and frozen <= value:
                break
            s *= 0.5
        else:
            if not np.isfinite(frozen):
                return _InitRun(index, q, t, value, False, it, "step size fell below floor on non-finite cost")
            # stationary under frozen correspondences
            return _InitRun(index, q, t, value, True, it)
        q, t = q_new, t_new
        value, gq, gt, m = reset_objective_grad(q, t, body, gen0, obs, lam)
        if not np.isfinite(value):
            return _InitRun(index, q, t, math.inf, False, it, "cost became non-finite")
        history.append(value)
        step = max(cfg.reset_step_size, STEP_GROWTH * s)
        if _converged(history):
            return _InitRun(index, q, t, value, True, it)
    return _InitRun(index, q, t, value, False, iterations)


def _sample_inits(cfg: OptimizerConfig, gen0, obs, centroid) -> list[RigidTransform]:
    if cfg.init_translation_bounds is None:
        lo, hi = init_translation_box(gen0, obs)
    else:
        lo, hi = (np.asarray(b) for b in cfg.init_translation_bounds)
    inits = []
    for i in range(int(cfg.num_inits)):
        rng = init_rng(cfg.rng_seed, i)
        q = random_rotation(rng)
        # the sampled position is where the tool centroid lands
        c_new = rng.uniform(lo, hi)
        inits.append(RigidTransform(q, c_new - quat_to_matrix(q) @ centroid))
    return inits


def optimize_reset(
    tool,
    gen0,
    obs,
    cfg: OptimizerConfig = OptimizerConfig(),
    initial_transforms: list[RigidTransform] | None = None,
    workers: int = 1,
) -> ResetResult:
    """Multi-start projected gradient descent for the reset transform.

    Each init draws a uniform rotation and a centroid position uniform in the
    init box, from a stream seeded by ``(rng_seed, init_index)``. The tool is
    optimized about its centroid; rotation gradients are scaled by the inverse
    squared RMS radius of the tool so both parameter blocks share a length
    scale. The step starts at ``reset_step_size``, doubles after each
    accepted step and halves on rejection. The lowest final cost wins, ties to
    the lower index.

    ``initial_transforms`` replaces the random draws (test hook).
    """
    tool = as_cloud(tool, "tool")
    gen0 = as_cloud(gen0, "gen0")
    obs = as_cloud(obs, "obs")
    c = tool.mean(axis=0)
    body = _Target(tool - c)
    G, O = _Target(gen0), _Target(obs)
    rot_gain = 1.0 / max(float(np.mean(np.sum(body.points**2, axis=1))), 1e-12)
    inits = list(initial_transforms) if initial_transforms is not None else _sample_inits(cfg, gen0, obs, c)
    if not inits:
        raise ValueError("at least one initialization is required")

    def run(i):
        T = inits[i]
        # T acts on the raw tool; on the centered body the translation absorbs R c
        t_body = T.translation + T.matrix @ c
        return _descend_reset(i, np.array(T.rotation), t_body, body, G, O, cfg, rot_gain, int(cfg.reset_iterations))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(run, range(len(inits))))
    else:
        runs = [run(i) for i in range(len(inits))]

    costs = tuple(r.cost if r.error is None and np.isfinite(r.cost) else math.inf for r in runs)
    if all(math.isinf(x) for x in costs):
        diag = [{"init_index": r.index, "cost": r.cost, "iterations": r.iterations, "error": r.error} for r in runs]
        raise OptimizationFailed("every reset initialization diverged", diag)
    best = min(range(len(runs)), key=lambda i: (costs[i], i))
    r = runs[best]
    T = RigidTransform(r.q, r.t).compose(RigidTransform(translation=-c))
    logger.debug("reset: init %d cost %.3e after %d iterations", best, r.cost, r.iterations)
    return ResetResult(T, float(costs[best]), best, r.converged, costs)


# --------------------------------------------------------------------------
# Stage 2: delta poses


def chain_weights(H: int) -> np.ndarray:
    """Jacobi scaling for the delta gradient: delta ``k`` moves frames ``k..H``.

    Its Chamfer curvature grows with the number of frames downstream, so the
    gradient row of delta ``k`` (0-based) is divided by ``H - k``.
    """
    return (1.0 / np.arange(H, 0, -1, dtype=float))[:, None]


def optimize_deltas(tool, T0: RigidTransform, gen, cfg: OptimizerConfig = OptimizerConfig()) -> DeltaResult:
    """Joint gradient descent over every delta, starting from identities.

    Each iteration re-matches nearest neighbors and steps along the negative
    gradient, row-scaled by :func:`chain_weights`. The first trial step is
    ``delta_step_size``; it doubles after an accepted step and halves until
    the frozen-correspondence objective does not increase. Non-finite trial
    costs are rejected the same way. If the step falls below ``1e-8`` on a
    non-finite cost the run fails, otherwise it stops as converged.
    """
    tool = as_cloud(tool, "tool")
    if len(gen) < 2:
        raise ValueError("generated trajectory needs at least frames 0 and 1")
    body = _Target(tool)
    targets = [_as_target(g, "gen frame") for g in gen[1:]]
    H = len(targets)
    lam = cfg.lambda_r
    weights = chain_weights(H)
    params = np.zeros((H, 6))
    chain, value, residuals, m = _delta_eval(params, body, T0, targets, lam)
    initial = value
    history = [value]
    converged = False
    step = cfg.delta_step_size
    it = 0
    for it in range(1, int(cfg.delta_iterations) + 1):
        direction = weights * _delta_grad(chain, targets, lam, m)
        s = step
        frozen = math.nan
        while s >= STEP_FLOOR:
            trial = params - s * direction
            _, frozen, _, _ = _delta_eval(trial, body, T0, targets, lam, m)
            if np.isfinite(frozen) and frozen <= value:
                break
            s *= 0.5
        else:
            if not np.isfinite(frozen):
                raise OptimizationFailed(
                    "delta descent: step size fell below floor on non-finite cost",
                    [{"stage": "deltas", "iteration": it, "cost": value}],
                )
            converged = True
            break
        params = trial
        chain, value, residuals, m = _delta_eval(params, body, T0, targets, lam)
        history.append(value)
        step = max(cfg.delta_step_size, STEP_GROWTH * s)
        if _converged(history):
            converged = True
            break
    deltas = [EulerDelta.from_vector(p) for p in params]
    per_step = [chamfer(chain.Ys[k + 1], targets[k].points) for k in range(H)]
    cost = float(sum(per_step)) + _delta_regularizer(params, lam)
    return DeltaResult(deltas, cost, per_step, float(initial), it, converged)


def chain_poses(T0: RigidTransform, deltas) -> list[RigidTransform]:
    """Absolute poses ``[T0, T1 o T0, T2 o T1 o T0, ...]``."""
    poses = [T0]
    for d in deltas:
        D = d.to_transform() if isinstance(d, EulerDelta) else d
        poses.append(D.compose(poses[-1]))
    return poses
