"""ADD, ADD-S, AUC, <2cm accuracy and invisible-surface percentage."""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import EmptyList
from .geometry import CameraIntrinsics, Pose

# exact brute force is used up to this many points; beyond it a k-d tree gives the same answer
BRUTE_FORCE_LIMIT = 1000


def nearest_distances(queries, targets, chunk=256):
    """Distance from each query point to its nearest target point (exact)."""
    queries = np.asarray(queries, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(targets) > BRUTE_FORCE_LIMIT:
        from scipy.spatial import cKDTree
        return cKDTree(targets).query(queries)[0]
    out = np.empty(len(queries))
    for s in range(0, len(queries), chunk):
        d = queries[s:s + chunk, None, :] - targets[None, :, :]
        out[s:s + chunk] = np.sqrt(np.min(np.einsum("ijk,ijk->ij", d, d), axis=1))
    return out


def add_metric(model, gt: Pose, est: Pose) -> float:
    x = model.surface_points
    return float(np.mean(np.linalg.norm(gt.apply(x) - est.apply(x), axis=1)))


def adds_metric(model, gt: Pose, est: Pose) -> float:
    x = model.surface_points
    return float(np.mean(nearest_distances(est.apply(x), gt.apply(x))))


def auc(distances, max_threshold=0.1) -> float:
    """Normalised area under accuracy(threshold) for thresholds in [0, max_threshold].

    accuracy(t) = fraction of distances <= t, a right-continuous step function,
    so the area is exactly mean(max_threshold - min(d, max_threshold)).
    """
    d = np.asarray(distances, dtype=np.float64).ravel()
    if d.size == 0:
        raise EmptyList("auc needs at least one distance")
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    return float(np.mean(max_threshold - np.minimum(d, max_threshold)) / max_threshold)


def pct_below(distances, threshold=0.02) -> float:
    """Percentage of distances strictly smaller than ``threshold``."""
    d = np.asarray(distances, dtype=np.float64).ravel()
    if d.size == 0:
        raise EmptyList("pct_below needs at least one distance")
    return 100.0 * float(np.count_nonzero(d < threshold)) / d.size


def invisible_surface_pct(model, gt_pose: Pose, depth_map, intrinsics: CameraIntrinsics,
                          h=0.020) -> float:
    """Percentage of model points whose projected depth disagrees with the measured depth by > h.

    Points projecting outside the image or onto a no-return pixel count as invisible.
    """
    depth_map = np.asarray(depth_map, dtype=np.float64)
    if depth_map.shape != (intrinsics.height, intrinsics.width):
        raise ValueError(f"depth map {depth_map.shape} does not match intrinsics "
                         f"{intrinsics.height}x{intrinsics.width}")
    pts = gt_pose.apply(model.surface_points)
    z = pts[:, 2]
    invisible = np.ones(len(pts), dtype=bool)
    front = z > 0
    zf = np.where(front, z, 1.0)
    u = np.rint(intrinsics.fx * pts[:, 0] / zf + intrinsics.cx).astype(np.int64)
    v = np.rint(intrinsics.fy * pts[:, 1] / zf + intrinsics.cy).astype(np.int64)
    inside = front & (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
    measured = np.zeros(len(pts))
    measured[inside] = depth_map[v[inside], u[inside]]
    ok = inside & (measured > 0) & (np.abs(z - measured) <= h)
    invisible[ok] = False
    return 100.0 * float(np.count_nonzero(invisible)) / len(pts)


@dataclass
class EvalRecord:
    object_id: int
    add: float
    adds: float
    invisible_pct: float
    timings: dict = field(default_factory=dict)
    scene: int = -1
    symmetric: bool = False
    estimate: tuple = ()               # estimated pose as 7 numbers, when recorded

    def __post_init__(self):
        if self.adds > self.add + 1e-12:
            raise ValueError("ADD-S cannot exceed ADD")
        if not 0.0 <= self.invisible_pct <= 100.0:
            raise ValueError("invisible_pct must lie in [0, 100]")

    def to_dict(self):
        return asdict(self)


class StageTimer:
    """Accumulates wall-clock seconds per named stage."""

    def __init__(self):
        self.seconds = {}

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - t0


OCCLUSION_BUCKETS = (60.0, 65.0, 70.0, 75.0, 80.0, 85.0, 90.0, 95.0)


def occlusion_curve(records, threshold=0.02, buckets=OCCLUSION_BUCKETS, use="adds"):
    """Accuracy (% of instances with error < threshold) per invisible-surface band.

    Band i collects records with ``buckets[i] <= invisible_pct < buckets[i+1]``
    (the last band is open-ended). Empty bands are omitted.
    """
    rows = []
    for i, lo in enumerate(buckets):
        hi = buckets[i + 1] if i + 1 < len(buckets) else np.inf
        sel = [getattr(r, use) for r in records if lo <= r.invisible_pct < hi]
        if sel:
            rows.append((lo, pct_below(sel, threshold), len(sel)))
    return rows


def summarize(records, auc_max=0.1, threshold=0.02):
    """Per-object and overall AUC / <threshold tables of ADD-S (Table-1 layout)."""
    by_obj = {}
    for r in records:
        by_obj.setdefault(r.object_id, []).append(r)
    table = {}
    for oid in sorted(by_obj):
        d = [r.adds for r in by_obj[oid]]
        table[oid] = {"auc": auc(d, auc_max), "pct_below": pct_below(d, threshold),
                      "mean_adds": float(np.mean(d)), "mean_add": float(np.mean([r.add for r in by_obj[oid]])),
                      "count": len(d)}
    all_d = [r.adds for r in records]
    table["MEAN"] = {"auc": auc(all_d, auc_max), "pct_below": pct_below(all_d, threshold),
                     "mean_adds": float(np.mean(all_d)),
                     "mean_add": float(np.mean([r.add for r in records])), "count": len(all_d)}
    return table


@dataclass
class Evaluation:
    records: list
    table: dict
    curve: list


def evaluate(scenes, models, estimator, mask_fn=None, threshold=0.02, auc_max=0.1,
             buckets=OCCLUSION_BUCKETS, h=0.020):
    """Run ``estimator(scene, index, mask, timer) -> Pose`` on every usable object instance.

    ``models`` maps object id to ObjectModel. The segmentation stage is a
    ground-truth mask lookup, optionally passed through ``mask_fn(scene, index)``;
    it is timed like the other stages. Instances whose mask has no valid
    depth are skipped.
    """
    if len(scenes) == 0:
        raise EmptyList("evaluation needs at least one scene")
    records = []
    for s_idx, scene in enumerate(scenes):
        for i, oid in enumerate(scene.object_ids):
            timer = StageTimer()
            with timer.stage("seg"):
                mask = mask_fn(scene, i) if mask_fn else scene.masks[i].astype(bool)
            if not np.any(np.asarray(mask, dtype=bool) & (scene.depth > 0)):
                continue
            est = estimator(scene, i, mask, timer)
            model, gt = models[oid], scene.gt_poses[i]
            add, adds = add_metric(model, gt, est), adds_metric(model, gt, est)
            records.append(EvalRecord(int(oid), add, min(adds, add),
                                      invisible_surface_pct(model, gt, scene.depth, scene.intrinsics, h),
                                      dict(timer.seconds), s_idx, bool(model.symmetric),
                                      tuple(float(x) for x in est.to_array())))
    if not records:
        raise EmptyList("no evaluable object instances")
    return Evaluation(records, summarize(records, auc_max, threshold),
                      occlusion_curve(records, threshold, buckets))
