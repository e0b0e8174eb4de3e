"""Synthetic tools and known-answer scenarios.

Stands in for learned trajectory generators: a scenario's generated frames are
the ground-truth poses applied to the tool, so a correct aligner has a known
answer. Objects are tabletop scale (0.05 to 0.3 m); the dough proxy sits at
the origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform, as_cloud, diameter, euler_matrix, random_rotation

TASKS = ("roll", "cut", "scoop-small", "scoop-large")
DEFAULT_HORIZON = 50
MIN_TOOL_STANDOFF = 0.5


@dataclass(frozen=True)
class ToolTemplate:
    """Parametric tool shape; sizes in meters.

    ``roller``: radius, length (axis along z).
    ``knife``: width (x), height (z), thickness (y).
    ``scoop``: width (x), depth (y), lip_height (z) -- a tray open on its +y side.
    """

    kind: str
    sizes: dict = field(default_factory=dict)
    sample_count: int = 512

    _REQUIRED = {
        "roller": ("radius", "length"),
        "knife": ("width", "height", "thickness"),
        "scoop": ("width", "depth", "lip_height"),
    }

    def __post_init__(self):
        if self.kind not in self._REQUIRED:
            raise ValueError(f"unknown tool kind {self.kind!r}")
        names = self._REQUIRED[self.kind]
        missing = [n for n in names if n not in self.sizes]
        if missing:
            raise ValueError(f"{self.kind} template is missing {missing}")
        for n in names:
            v = float(self.sizes[n])
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{self.kind}.{n} must be positive, got {v!r}")
        if int(self.sample_count) < 64:
            raise ValueError(f"sample_count must be >= 64, got {self.sample_count}")

    @property
    def extent(self) -> np.ndarray:
        """Axis-aligned bounding-box size of the shape in its own frame."""
        s = self.sizes
        if self.kind == "roller":
            return np.array([2 * s["radius"], 2 * s["radius"], s["length"]])
        if self.kind == "knife":
            return np.array([s["width"], s["thickness"], s["height"]])
        return np.array([s["width"], s["depth"], s["lip_height"]])

    def replace(self, **sizes) -> ToolTemplate:
        return ToolTemplate(self.kind, {**self.sizes, **sizes}, self.sample_count)


TEMPLATES = {
    "roll": ToolTemplate("roller", {"radius": 0.03, "length": 0.2}),
    "cut": ToolTemplate("knife", {"width": 0.12, "height": 0.06, "thickness": 0.004}),
    "scoop-small": ToolTemplate("scoop", {"width": 0.06, "depth": 0.06, "lip_height": 0.02}),
    "scoop-large": ToolTemplate("scoop", {"width": 0.1, "depth": 0.1, "lip_height": 0.03}),
}


def _sample_faces(rng, faces, count) -> np.ndarray:
    """Area-weighted samples over parallelograms ``(origin, edge_u, edge_v)``."""
    areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v in faces])
    which = rng.choice(len(faces), size=count, p=areas / areas.sum())
    st = rng.random((count, 2))
    origin = np.array([f[0] for f in faces])[which]
    eu = np.array([f[1] for f in faces])[which]
    ev = np.array([f[2] for f in faces])[which]
    return origin + st[:, :1] * eu + st[:, 1:] * ev


def _box_faces(size, open_faces=()) -> list:
    sx, sy, sz = size
    lo = -0.5 * np.asarray(size, dtype=float)
    ex, ey, ez = np.array([sx, 0, 0]), np.array([0, sy, 0]), np.array([0, 0, sz])
    faces = {
        "-x": (lo, ey, ez),
        "+x": (lo + ex, ey, ez),
        "-y": (lo, ex, ez),
        "+y": (lo + ey, ex, ez),
        "-z": (lo, ex, ey),
        "+z": (lo + ez, ex, ey),
    }
    return [f for k, f in faces.items() if k not in open_faces]


def _sample_cylinder(rng, radius, length, count) -> np.ndarray:
    side = 2 * np.pi * radius * length
    cap = np.pi * radius**2
    n_side = int(round(count * side / (side + 2 * cap)))
    theta = rng.uniform(0, 2 * np.pi, n_side)
    z = rng.uniform(-0.5 * length, 0.5 * length, n_side)
    pts = [np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)]
    n_cap = count - n_side
    r = radius * np.sqrt(rng.random(n_cap))
    phi = rng.uniform(0, 2 * np.pi, n_cap)
    zc = np.where(rng.random(n_cap) < 0.5, -0.5, 0.5) * length
    pts.append(np.stack([r * np.cos(phi), r * np.sin(phi), zc], axis=1))
    return np.concatenate(pts)


def _sample_sphere(rng, radius, count) -> np.ndarray:
    v = rng.standard_normal((count, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def make_tool(template: ToolTemplate, seed: int) -> np.ndarray:
    """Sample ``template.sample_count`` surface points, centered at their centroid."""
    rng = np.random.default_rng(seed)
    s = template.sizes
    n = int(template.sample_count)
    if template.kind == "roller":
        pts = _sample_cylinder(rng, s["radius"], s["length"], n)
    elif template.kind == "knife":
        pts = _sample_faces(rng, _box_faces(template.extent), n)
    else:
        pts = _sample_faces(rng, _box_faces(template.extent, open_faces=("+y", "+z")), n)
    return pts - pts.mean(axis=0)


def perturb_tool(tool, seed: int, magnitude: float) -> np.ndarray:
    """Deterministic shape change standing in for an unseen tool.

    Each axis is scaled by a factor in ``[1 - 0.3 m, 1 + 0.3 m]`` about the
    centroid, then a smooth sinusoidal warp with amplitude at most
    ``0.1 * m * diameter`` is added. ``m = 0`` returns the input unchanged.
    """
    if not 0.0 <= magnitude <= 1.0:
        raise ValueError(f"magnitude must lie in [0, 1], got {magnitude!r}")
    P = as_cloud(tool, "tool")
    if magnitude == 0.0:
        return P.copy()
    rng = np.random.default_rng(seed)
    c = P.mean(axis=0)
    scale = 1.0 + 0.3 * magnitude * rng.uniform(-1.0, 1.0, 3)
    scaled = c + (P - c) * scale
    diam = diameter(P)
    # low-frequency warp: one sinusoid per output axis with wavelength >= 2 * diameter
    freq = rng.standard_normal((3, 3))
    freq *= (np.pi / (2.0 * diam)) / np.linalg.norm(freq, axis=1, keepdims=True)
    phase = rng.uniform(0, 2 * np.pi, 3)
    direction = rng.standard_normal((3, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    amp = 0.1 * magnitude * diam / np.sqrt(3.0)
    waves = np.sin((P - c) @ freq.T + phase)  # (n, 3), each in [-1, 1]
    warp = amp * waves @ direction  # |warp| <= sqrt(3) * amp
    return scaled + warp


@dataclass(frozen=True, eq=False)
class Scenario:
    """Known-answer alignment problem.

    ``truth[t]`` is the absolute pose mapping ``tool`` onto ``gen[t]``;
    ``truth[0]`` is the reset pose.
    """

    task: str
    tool: np.ndarray
    distractor_tools: list
    obs: np.ndarray
    goal: np.ndarray
    gen: list
    truth: list
    seed: int
    horizon: int

    def deltas(self) -> list[RigidTransform]:
        return [self.truth[t].compose(self.truth[t - 1].inverse()) for t in range(1, len(self.truth))]


def _placement_far_from(rng, radius: float) -> RigidTransform:
    """Random pose whose translation lies between ``radius`` and ``radius + 0.3`` from the origin."""
    direction = rng.standard_normal(3)
    direction[2] = abs(direction[2])
    direction /= np.linalg.norm(direction)
    dist = radius + rng.uniform(0.0, 0.3)
    return RigidTransform(random_rotation(rng), direction * dist)


def _pose(R: np.ndarray, t) -> RigidTransform:
    return RigidTransform.from_matrix(R, t)


def _roll_poses(rng, H, dough_top, radius):
    yaw = rng.uniform(-np.pi, np.pi)
    # roller axis (tool z) lies horizontal, across the sweep direction
    R = euler_matrix([np.pi / 2, 0.0, yaw])
    sweep = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    start = -0.05 * sweep + np.array([0.0, 0.0, dough_top + radius + 0.01])
    length = rng.uniform(0.08, 0.12)
    descent = rng.uniform(0.01, 0.02)
    s = np.linspace(0.0, 1.0, H + 1)
    return [_pose(R, start + si * length * sweep - si * descent * np.array([0, 0, 1.0])) for si in s]


def _cut_poses(rng, H, dough_top, height, depth):
    yaw = rng.uniform(-np.pi, np.pi)
    R = euler_matrix([0.0, 0.0, yaw])
    offset = rng.uniform(-0.02, 0.02, 2)
    start = np.array([offset[0], offset[1], dough_top + 0.5 * height + 0.01])
    drop = 0.01 + depth
    return [_pose(R, start - np.array([0, 0, drop * si])) for si in np.linspace(0.0, 1.0, H + 1)]


def _scoop_poses(rng, H, dough_radius, template: ToolTemplate):
    yaw = rng.uniform(-np.pi, np.pi)
    Ryaw = euler_matrix([0.0, 0.0, yaw])
    toward = Ryaw @ np.array([0.0, 1.0, 0.0])  # open side of the tray faces the dough
    depth = template.sizes["depth"]
    lip = template.sizes["lip_height"]
    start = -(dough_radius + 0.5 * depth + 0.02) * toward + np.array([0, 0, 0.5 * lip + 0.03])
    n1 = max(1, H // 3)
    n2 = max(1, H // 3)
    n3 = max(0, H - n1 - n2)
    poses = []
    # descend
    for s in np.linspace(0.0, 1.0, n1 + 1):
        poses.append((0.0, start - np.array([0, 0, 0.03 * s])))
    # push under the dough while tilting the tray up about its width axis
    low = poses[-1][1]
    push = rng.uniform(0.03, 0.05)
    tilt = rng.uniform(0.4, 0.7)
    for s in np.linspace(0.0, 1.0, n2 + 1)[1:]:
        poses.append((tilt * s, low + push * s * toward))
    # lift
    top_tilt, top = poses[-1]
    for s in np.linspace(0.0, 1.0, n3 + 1)[1:]:
        poses.append((top_tilt, top + np.array([0, 0, 0.06 * s])))
    return [_pose(Ryaw @ euler_matrix([a, 0.0, 0.0]), t) for a, t in poses[: H + 1]]


def _dough(rng, task, count=512):
    if task == "roll":
        size = np.array([0.16, 0.16, 0.04])
        return _sample_faces(rng, _box_faces(size), count), 0.5 * size[2]
    if task == "cut":
        size = np.array([0.1, 0.1, 0.05])
        return _sample_faces(rng, _box_faces(size), count), 0.5 * size[2]
    radius = 0.04 if task == "scoop-small" else 0.06
    return _sample_sphere(rng, radius, count), radius


def dough_displacement(obs, tool_frames, contact_radius: float = 0.01) -> np.ndarray:
    """Declared dough proxy: no physics.

    At each step, dough points within ``contact_radius`` of the tool's new
    position are carried along by the motion of their nearest tool point.
    """
    from scipy.spatial import cKDTree

    D = as_cloud(obs, "obs").copy()
    for prev, cur in zip(tool_frames[:-1], tool_frames[1:]):
        dist, idx = cKDTree(cur).query(D)
        hit = dist < contact_radius
        D[hit] += cur[idx[hit]] - prev[idx[hit]]
    return D


def make_scenario(task: str, seed: int, horizon: int = DEFAULT_HORIZON, sample_count: int = 512) -> Scenario:
    """Build a known-answer scenario for ``task`` in :data:`TASKS`."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if int(horizon) < 1:
        raise ValueError("horizon must be >= 1")
    H = int(horizon)
    root = np.random.default_rng(seed)
    tool_seed, dough_seed, traj_seed, place_seed, distractor_seed = root.integers(0, 2**63 - 1, 5)
    template = ToolTemplate(TEMPLATES[task].kind, TEMPLATES[task].sizes, sample_count)
    canonical = make_tool(template, int(tool_seed))

    obs, dough_extent = _dough(np.random.default_rng(dough_seed), task)
    rng = np.random.default_rng(traj_seed)
    if task == "roll":
        world = _roll_poses(rng, H, dough_extent, template.sizes["radius"])
    elif task == "cut":
        world = _cut_poses(rng, H, dough_extent, template.sizes["height"], 2 * dough_extent)
    else:
        world = _scoop_poses(rng, H, dough_extent, template)

    place_rng = np.random.default_rng(place_seed)
    # standoff is measured surface to surface: dough radius + standoff + tool radius
    dough_radius = float(np.max(np.linalg.norm(obs, axis=1)))
    placement = _placement_far_from(place_rng, dough_radius + MIN_TOOL_STANDOFF + 0.5 * diameter(canonical))
    tool = placement.apply(canonical)
    to_canonical = placement.inverse()
    truth = [w.compose(to_canonical) for w in world]
    gen = [T.apply(tool) for T in truth]

    distractors = []
    d_rng = np.random.default_rng(distractor_seed)
    for other in TASKS:
        if TEMPLATES[other].kind == template.kind:
            continue
        other_t = ToolTemplate(TEMPLATES[other].kind, TEMPLATES[other].sizes, sample_count)
        shape = make_tool(other_t, int(d_rng.integers(0, 2**63 - 1)))
        far = dough_radius + MIN_TOOL_STANDOFF + 0.5 * diameter(shape)
        distractors.append(_placement_far_from(d_rng, far).apply(shape))

    goal = dough_displacement(obs, gen)
    return Scenario(task, tool, distractors, obs, goal, gen, truth, int(seed), H)
