"""Random scene layouts."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..geometry import CameraIntrinsics, Pose, quat_multiply
from .scene import render_scene


@dataclass
class SceneSpec:
    depth_range: tuple = (0.5, 0.8)
    # "full": uniform over SO(3); "tabletop": any yaw about the model z axis, tilt up to max_tilt_deg
    rotation: str = "tabletop"
    max_tilt_deg: float = 60.0
    occluder_range: tuple = (0.0, 0.0)
    depth_noise: float = 0.001
    dropout: float = 0.01
    background_depth: float = 1.5
    margin_px: int = 12

    def __post_init__(self):
        self.depth_range = tuple(self.depth_range)
        self.occluder_range = tuple(self.occluder_range)
        if self.rotation not in ("full", "tabletop"):
            raise ValueError(f"rotation must be 'full' or 'tabletop', got {self.rotation!r}")

    def to_dict(self):
        d = asdict(self)
        d["depth_range"] = list(self.depth_range)
        d["occluder_range"] = list(self.occluder_range)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _random_rotation(rng, mode, max_tilt_deg):
    if mode == "full":
        q = rng.normal(size=4)
        return q / np.linalg.norm(q)
    yaw = rng.uniform(0, 2 * np.pi)
    q_yaw = np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])
    tilt = np.deg2rad(rng.uniform(0, max_tilt_deg))
    phi = rng.uniform(0, 2 * np.pi)
    axis = np.array([np.cos(phi), np.sin(phi), 0.0])
    q_tilt = np.concatenate([[np.cos(tilt / 2)], np.sin(tilt / 2) * axis])
    return quat_multiply(q_tilt, q_yaw)


def random_scene_poses(models, rng, spec: SceneSpec, intrinsics: CameraIntrinsics):
    """Non-intersecting placements whose centres project inside the image margin."""
    poses = []
    for model in models:
        for _ in range(1000):
            z = rng.uniform(*spec.depth_range)
            u = rng.uniform(spec.margin_px, intrinsics.width - spec.margin_px)
            v = rng.uniform(spec.margin_px, intrinsics.height - spec.margin_px)
            t = np.array([(u - intrinsics.cx) * z / intrinsics.fx,
                          (v - intrinsics.cy) * z / intrinsics.fy, z])
            clash = any(np.linalg.norm(t - p.translation) < model.radius + m.radius
                        for p, m in zip(poses, models))
            if not clash:
                break
        else:
            raise RuntimeError("could not place objects without intersection")
        poses.append(Pose(_random_rotation(rng, spec.rotation, spec.max_tilt_deg), t))
    return poses


def generate_scene(models, seed, spec: SceneSpec = None, intrinsics: CameraIntrinsics = None,
                   occluder_fraction=None):
    """Random layout of ``models`` rendered with the settings in ``spec``."""
    spec = spec or SceneSpec()
    intrinsics = intrinsics or CameraIntrinsics()
    rng = np.random.default_rng(seed)
    poses = random_scene_poses(models, rng, spec, intrinsics)
    if occluder_fraction is None:
        lo, hi = spec.occluder_range
        occluder_fraction = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return render_scene(models, poses, intrinsics, occluder_fraction=occluder_fraction,
                        seed=int(rng.integers(2 ** 31)), depth_noise=spec.depth_noise,
                        dropout=spec.dropout, background_depth=spec.background_depth)
