"""Parametric object models standing in for scanned meshes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import DegenerateSize, UnknownShape

SHAPE_KINDS = ("box", "lshape", "cylinder", "sphere")
SYMMETRIC_KINDS = ("cylinder", "sphere")
MIN_SIZE, MAX_SIZE = 0.02, 0.20

# number of size parameters each kind takes, and what they mean
_SIZE_ARITY = {
    "box": 3,        # extents along x, y, z
    "lshape": 3,     # arm length along x, arm length along y, height along z
    "cylinder": 2,   # radius, height (axis = z)
    "sphere": 1,     # radius
}
_PALETTE = np.array([
    [0.85, 0.20, 0.15], [0.15, 0.55, 0.85], [0.20, 0.75, 0.30],
    [0.90, 0.75, 0.10], [0.60, 0.25, 0.75], [0.95, 0.50, 0.10],
])


def _sample_box(extents, n, rng):
    """Area-weighted uniform samples on the surface of a centred box.

    Half the samples are mirrored through the origin so the sample mean is exactly zero.
    """
    half = np.asarray(extents) / 2.0
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    n_half = (n + 1) // 2
    axis = rng.choice(3, size=n_half, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n_half, 3)) * half
    sign = rng.choice([-1.0, 1.0], size=n_half)
    pts[np.arange(n_half), axis] = sign * half[axis]
    return np.concatenate([pts, -pts])[:n] if n % 2 == 0 else np.concatenate([pts, -pts[:-1]])


def _sample_cylinder(radius, height, n, rng):
    r, hh = radius, height / 2.0
    side, cap = 2 * np.pi * r * height, np.pi * r * r
    n_half = (n + 1) // 2
    on_side = rng.uniform(size=n_half) < side / (side + 2 * cap)
    theta = rng.uniform(0, 2 * np.pi, size=n_half)
    rad = np.where(on_side, r, r * np.sqrt(rng.uniform(size=n_half)))
    z = np.where(on_side, rng.uniform(-hh, hh, size=n_half), rng.choice([-hh, hh], size=n_half))
    pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
    out = np.concatenate([pts, -pts])
    return out[:n]


def _sample_sphere(radius, n, rng):
    n_half = (n + 1) // 2
    v = rng.normal(size=(n_half, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pts = v * radius
    return np.concatenate([pts, -pts])[:n]


def _lshape_boxes(dims):
    """The L prism as two boxes (min corner, max corner) sharing the corner square."""
    ax, ay, h = dims
    t = min(ax, ay) / 3.0
    return [(np.array([0, 0, 0]), np.array([ax, t, h])),
            (np.array([0, t, 0]), np.array([t, ay, h]))]


def _sample_lshape(dims, n, rng):
    """Uniform samples on the outer surface of an L-shaped prism (in its own corner frame).

    Each box's surface is sampled in proportion to its area; samples falling in
    the closure of the other box lie on the internal interface and are rejected.
    """
    boxes = _lshape_boxes(dims)
    areas = []
    for lo, hi in boxes:
        e = hi - lo
        areas.append(2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2]))
    p_box = np.array(areas) / np.sum(areas)
    out = []
    need = n
    while need > 0:
        m = 2 * need + 16
        which = rng.choice(2, size=m, p=p_box)
        keep = []
        for b, (lo, hi) in enumerate(boxes):
            k = int(np.sum(which == b))
            if k == 0:
                continue
            pts = _sample_box(hi - lo, k, rng) + (lo + hi) / 2.0
            olo, ohi = boxes[1 - b]
            in_other = np.all((pts >= olo - 1e-12) & (pts <= ohi + 1e-12), axis=1)
            keep.append(pts[~in_other])
        pts = np.concatenate(keep)
        pts = pts[rng.permutation(len(pts))][:need]
        out.append(pts)
        need -= len(pts)
    return np.concatenate(out)


def _raw_samples(kind, dims, n, rng):
    if kind == "box":
        return _sample_box(dims, n, rng)
    if kind == "cylinder":
        return _sample_cylinder(dims[0], dims[1], n, rng)
    if kind == "sphere":
        return _sample_sphere(dims[0], n, rng)
    return _sample_lshape(dims, n, rng)


def _box_normals(points, lo, hi):
    """Outward normal of the box face each point lies closest to."""
    d = np.concatenate([points - lo, hi - points], axis=1)      # distance to each face plane
    face = np.argmin(d, axis=1)
    n = np.zeros_like(points)
    n[np.arange(len(points)), face % 3] = np.where(face < 3, -1.0, 1.0)
    return n


def _raw_normals(kind, dims, points):
    if kind == "box":
        half = np.asarray(dims) / 2.0
        return _box_normals(points, -half, half)
    if kind == "sphere":
        return points / np.linalg.norm(points, axis=1, keepdims=True)
    if kind == "cylinder":
        r, hh = dims[0], dims[1] / 2.0
        rad = np.linalg.norm(points[:, :2], axis=1)
        cap = (hh - np.abs(points[:, 2])) < (r - rad)
        n = np.zeros_like(points)
        n[:, :2] = points[:, :2] / np.maximum(rad, 1e-12)[:, None]
        n[cap] = 0.0
        n[cap, 2] = np.sign(points[cap, 2])
        return n
    ax, ay, h = dims
    t = min(ax, ay) / 3.0
    hull = _box_normals(points, np.zeros(3), np.array([ax, ay, h]))
    # the two concave faces of the L
    d_hull = np.min(np.concatenate([points, np.array([ax, ay, h]) - points], axis=1), axis=1)
    inner_x = np.abs(points[:, 0] - t) < d_hull
    inner_y = np.abs(points[:, 1] - t) < d_hull
    hull[inner_x & (points[:, 1] > t)] = (1.0, 0.0, 0.0)
    hull[inner_y & (points[:, 0] > t)] = (0.0, 1.0, 0.0)
    return hull


@dataclass(frozen=True)
class ObjectModel:
    id: int
    kind: str
    dims: tuple
    surface_points: np.ndarray
    point_colors: np.ndarray
    symmetric: bool
    seed: int = 0
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def n_points(self):
        return len(self.surface_points)

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(self.surface_points, axis=1).max())

    @property
    def diameter(self) -> float:
        """Largest pairwise distance between model points."""
        p = self.surface_points
        best = 0.0
        for start in range(0, len(p), 256):
            d = np.linalg.norm(p[start:start + 256, None, :] - p[None, :, :], axis=-1)
            best = max(best, float(d.max()))
        return best

    def color_at(self, points) -> np.ndarray:
        return model_colors(self.kind, self.dims, self.id, points)

    def sample_surface(self, n, rng) -> np.ndarray:
        """Fresh uniform surface samples in the model frame."""
        return _raw_samples(self.kind, self.dims, n, rng) - self.offset

    def normals_at(self, points) -> np.ndarray:
        """Outward unit normals for points lying on the surface (object frame)."""
        return _raw_normals(self.kind, self.dims, np.asarray(points) + self.offset)

    def surface_area(self) -> float:
        d = self.dims
        if self.kind == "box":
            return 2 * (d[0] * d[1] + d[1] * d[2] + d[0] * d[2])
        if self.kind == "cylinder":
            r = d[0]
            return 2 * np.pi * r * d[1] + 2 * np.pi * r * r
        if self.kind == "sphere":
            return 4 * np.pi * d[0] ** 2
        ax, ay, h = d
        t = min(ax, ay) / 3.0
        cap = ax * t + (ay - t) * t
        return 2 * cap + h * 2 * (ax + ay)

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "dims": list(self.dims),
                "seed": self.seed, "n_points": self.n_points}

    @classmethod
    def from_dict(cls, d) -> "ObjectModel":
        return make_model(d["kind"], d["dims"], seed=d["seed"], model_id=d["id"],
                          n_points=d.get("n_points", 500))


def model_colors(kind, dims, model_id, points) -> np.ndarray:
    """Deterministic surface texture: a base color modulated by stripes.

    Stripes run along the model x axis for box/L (breaking their symmetry) and
    along the axis for cylinders, so the texture respects each shape's symmetry.
    """
    points = np.asarray(points, dtype=np.float64)
    base = _PALETTE[model_id % len(_PALETTE)]
    if kind == "sphere":
        shade = np.ones(len(points))
    elif kind == "cylinder":
        shade = 0.55 + 0.45 * (np.sin(points[:, 2] * 2 * np.pi / (dims[1] / 2)) > 0)
    else:
        period = max(dims[0], dims[1]) / 2.0
        shade = 0.45 + 0.35 * (np.sin(points[:, 0] * 2 * np.pi / period) > 0) \
            + 0.2 * (points[:, 1] > 0)
    return np.clip(base[None, :] * shade[:, None], 0.0, 1.0)


def make_model(kind, dims, seed=0, model_id=0, n_points=500) -> ObjectModel:
    """Sample a parametric model.

    ``dims`` are in meters, each in [0.02, 0.20]; see the module table for the
    meaning per kind. Sampling is deterministic in ``seed``.
    """
    if kind not in SHAPE_KINDS:
        raise UnknownShape(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    dims = tuple(float(d) for d in np.atleast_1d(dims))
    if len(dims) != _SIZE_ARITY[kind]:
        raise DegenerateSize(f"{kind} takes {_SIZE_ARITY[kind]} size parameters, got {len(dims)}")
    for d in dims:
        if not (MIN_SIZE <= d <= MAX_SIZE):
            raise DegenerateSize(f"size {d} m outside [{MIN_SIZE}, {MAX_SIZE}] m")
    if n_points < 100:
        raise DegenerateSize("object models need at least 100 surface points")
    rng = np.random.default_rng(seed)
    pts = _raw_samples(kind, dims, n_points, rng)
    offset = np.zeros(3)
    if kind == "lshape":
        offset = pts.mean(axis=0)
        pts = pts - offset
    colors = model_colors(kind, dims, model_id, pts)
    pts.flags.writeable = False
    return ObjectModel(int(model_id), kind, dims, pts, colors, kind in SYMMETRIC_KINDS,
                       int(seed), offset)
