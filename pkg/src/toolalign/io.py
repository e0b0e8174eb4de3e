"""Text formats: point clouds, frame-block trajectories, pose CSVs, configs.

Every number is written with 9 significant digits.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np

from .geometry import RigidTransform, as_cloud
from .optimizer import OptimizerConfig

POSE_HEADER = ["t", "tx", "ty", "tz", "qw", "qx", "qy", "qz"]


class FormatError(ValueError):
    """A file does not follow its declared text format."""


def fmt(x: float) -> str:
    return f"{float(x):.9g}"


def _parse_point(line: str, where: str) -> list[float]:
    parts = line.split()
    if len(parts) != 3:
        raise FormatError(f"{where}: expected 3 coordinates, got {len(parts)}")
    try:
        xyz = [float(p) for p in parts]
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from None
    if not all(np.isfinite(xyz)):
        raise FormatError(f"{where}: non-finite coordinate")
    return xyz


def _content_lines(text: str):
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield n, line


# point clouds: one "x y z" line per point, '#' starts a comment


def format_cloud(P) -> str:
    P = as_cloud(P)
    return "".join(f"{fmt(x)} {fmt(y)} {fmt(z)}\n" for x, y, z in P)


def parse_cloud(text: str, source: str = "<cloud>") -> np.ndarray:
    pts = [_parse_point(line, f"{source}:{n}") for n, line in _content_lines(text)]
    if not pts:
        raise FormatError(f"{source}: no points")
    return np.asarray(pts, dtype=np.float64)


def write_cloud(path, P) -> None:
    Path(path).write_text(format_cloud(P))


def read_cloud(path) -> np.ndarray:
    return parse_cloud(Path(path).read_text(), str(path))


# generated trajectories: blocks opened by "frame <t>", t = 0, 1, 2, ...


def format_trajectory(frames) -> str:
    return "".join(f"frame {t}\n{format_cloud(P)}" for t, P in enumerate(frames))


def parse_trajectory(text: str, source: str = "<trajectory>") -> list[np.ndarray]:
    frames: list[list] = []
    for n, line in _content_lines(text):
        where = f"{source}:{n}"
        if line.startswith("frame"):
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{where}: malformed frame header {line!r}")
            try:
                t = int(parts[1])
            except ValueError:
                raise FormatError(f"{where}: frame index {parts[1]!r} is not an integer") from None
            if t != len(frames):
                raise FormatError(f"{where}: expected frame {len(frames)}, found frame {t}")
            frames.append([])
        else:
            if not frames:
                raise FormatError(f"{where}: point before the first frame header")
            frames[-1].append(_parse_point(line, where))
    if not frames:
        raise FormatError(f"{source}: no frames")
    for t, pts in enumerate(frames):
        if not pts:
            raise FormatError(f"{source}: frame {t} has no points")
    return [np.asarray(pts, dtype=np.float64) for pts in frames]


def write_trajectory(path, frames) -> None:
    Path(path).write_text(format_trajectory(frames))


def read_trajectory(path) -> list[np.ndarray]:
    return parse_trajectory(Path(path).read_text(), str(path))


# absolute pose CSVs


def write_poses(path, poses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POSE_HEADER)
        for t, T in enumerate(poses):
            w.writerow([t, *(fmt(v) for v in T.translation), *(fmt(v) for v in T.rotation)])


def read_poses(path) -> list[RigidTransform]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != POSE_HEADER:
        raise FormatError(f"{path}: header must be {','.join(POSE_HEADER)}")
    poses = []
    for n, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != len(POSE_HEADER):
            raise FormatError(f"{path}:{n}: expected {len(POSE_HEADER)} fields")
        try:
            t = int(row[0])
            vals = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: {exc}") from None
        if t != len(poses):
            raise FormatError(f"{path}:{n}: expected t={len(poses)}, found {t}")
        poses.append(RigidTransform(vals[3:], vals[:3]))
    if not poses:
        raise FormatError(f"{path}: no poses")
    return poses


# OptimizerConfig as key=value lines

_CONFIG_TYPES = {
    "lambda_c": float,
    "lambda_r": float,
    "reset_step_size": float,
    "delta_step_size": float,
    "num_inits": int,
    "reset_iterations": int,
    "delta_iterations": int,
    "init_translation_bounds": "box",
    "rng_seed": int,
}


def parse_config(text: str, source: str = "<config>") -> OptimizerConfig:
    """Parse ``key = value`` lines; every key is optional, unknown keys fail.

    ``init_translation_bounds`` takes six comma-separated numbers:
    ``lo_x,lo_y,lo_z,hi_x,hi_y,hi_z``.
    """
    values: dict = {}
    for n, line in _content_lines(text):
        where = f"{source}:{n}"
        if "=" not in line:
            raise FormatError(f"{where}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_TYPES:
            raise FormatError(f"{where}: unknown key {key!r}")
        if key in values:
            raise FormatError(f"{where}: duplicate key {key!r}")
        kind = _CONFIG_TYPES[key]
        try:
            if kind == "box":
                nums = [float(v) for v in raw.split(",")]
                if len(nums) != 6:
                    raise ValueError("init_translation_bounds needs 6 numbers")
                values[key] = (tuple(nums[:3]), tuple(nums[3:]))
            else:
                values[key] = kind(raw)
        except ValueError as exc:
            raise FormatError(f"{where}: bad value for {key}: {exc}") from None
    try:
        return OptimizerConfig(**values)
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from None


def read_config(path) -> OptimizerConfig:
    return parse_config(Path(path).read_text(), str(path))


def format_config(cfg: OptimizerConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            continue
        if f.name == "init_translation_bounds":
            v = ",".join(fmt(x) for x in (*v[0], *v[1]))
        elif isinstance(v, float):
            v = fmt(v)
        lines.append(f"{f.name} = {v}\n")
    return "".join(lines)


def round_floats(obj):
    if isinstance(obj, float):
        return float(fmt(obj)) if np.isfinite(obj) else str(obj)
    if isinstance(obj, dict):
        return {k: round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v) for v in obj]
    return obj


def dump_json(path, obj) -> None:
    """JSON with floats cut to 9 significant digits and stable key order."""
    Path(path).write_text(json.dumps(round_floats(obj), indent=2, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())
