"""Point-to-point ICP baseline."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from scipy.spatial import cKDTree

from .exceptions import DegenerateConfiguration, EmptyCloud
from .geometry import Pose, compose
from .metrics import BRUTE_FORCE_LIMIT


@dataclass
class IcpConfig:
    max_iterations: int = 30
    convergence_tol: float = 1e-6
    max_correspondence_dist: float = 0.05

    def __post_init__(self):
        if not (self.max_iterations > 0 and self.convergence_tol > 0 and self.max_correspondence_dist > 0):
            raise ValueError("ICP settings must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def best_rigid_align(source, target) -> Pose:
    """Least-squares rigid transform taking ``source`` rows onto ``target`` rows (Kabsch/Umeyama)."""
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"expected matching (K, 3) arrays, got {src.shape} and {dst.shape}")
    if len(src) < 3:
        raise DegenerateConfiguration("need at least 3 correspondences")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateConfiguration("source points are collinear or coincident")
    U, _, Vt = np.linalg.svd(a.T @ b)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return Pose.from_matrix(R, mu_d - R @ mu_s)


def nearest_neighbors(queries, targets, chunk=512):
    """Exact (index, distance) of the nearest target for each query.

    Brute force for small target sets, a k-d tree (also exact) above BRUTE_FORCE_LIMIT.
    """
    if len(targets) > BRUTE_FORCE_LIMIT:
        dist, idx = cKDTree(targets).query(queries)
        return idx.astype(np.int64), dist
    idx = np.empty(len(queries), dtype=np.int64)
    dist = np.empty(len(queries))
    t2 = np.sum(targets * targets, axis=1)
    for s in range(0, len(queries), chunk):
        q = queries[s:s + chunk]
        d2 = np.sum(q * q, axis=1)[:, None] + t2[None, :] - 2 * q @ targets.T
        j = np.argmin(d2, axis=1)
        idx[s:s + chunk] = j
        # recompute the winning distance directly; the expanded form loses precision near zero
        dist[s:s + chunk] = np.linalg.norm(q - targets[j], axis=1)
    return idx, dist


def icp_refine(observed, model, init: Pose, config: IcpConfig = None, return_history=False):
    """Align model points (posed by ``init``) to the observed camera-frame cloud.

    Each iteration matches every observed point to its nearest posed model
    point, drops pairs farther than ``max_correspondence_dist`` and solves the
    closed-form update. Stops when the mean residual changes by less than
    ``convergence_tol`` or after ``max_iterations``.

    Returns ``(pose, iterations, mean residual)``, plus the per-iteration
    residuals when ``return_history`` is set.
    """
    config = config or IcpConfig()
    obs = np.asarray(getattr(observed, "points", observed), dtype=np.float64)
    if len(obs) == 0:
        raise EmptyCloud("ICP needs a non-empty observed cloud")
    model_pts = model.surface_points if hasattr(model, "surface_points") else np.asarray(model)
    pose = init
    prev = np.inf
    history = []
    it = 0
    while True:
        posed = pose.apply(model_pts)
        j, d = nearest_neighbors(obs, posed)
        keep = d <= config.max_correspondence_dist
        if np.count_nonzero(keep) < 3:
            raise DegenerateConfiguration("fewer than 3 correspondences within the gate")
        residual = float(d[keep].mean())
        history.append(residual)
        if abs(prev - residual) < config.convergence_tol or it >= config.max_iterations:
            break
        prev = residual
        pose = compose(best_rigid_align(posed[j[keep]], obs[keep]), pose)
        it += 1
    if return_history:
        return pose, it, residual, history
    return pose, it, residual
