"""Report writers: text table, JSON, CSVs and PPM pose overlays."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .geometry import Pose, project_points

OVERLAY_COLORS = np.array([[255, 40, 40], [40, 220, 40], [60, 120, 255], [255, 220, 0],
                           [255, 0, 255], [0, 230, 230]], dtype=np.uint8)


def format_table(table, title=None):
    """Plain-text table: one row per object plus MEAN, AUC and <threshold in percent."""
    lines = [title] if title else []
    lines.append(f"{'object':>8}  {'n':>5}  {'AUC':>14}  {'<2cm':>14}  {'mean ADD-S (m)':>16}")
    for key, row in table.items():
        name = key if isinstance(key, str) else str(key)
        lines.append(f"{name:>8}  {row['count']:>5d}  {100 * row['auc']:>14.9f}  "
                     f"{row['pct_below']:>14.9f}  {row['mean_adds']:>16.12f}")
    return "\n".join(lines) + "\n"


def parse_table(text):
    """Inverse of format_table for the numeric columns: ``{object: (auc, pct_below)}``."""
    out = {}
    for line in text.splitlines():
        parts = line.split()
        if len(parts) == 5 and parts[0] != "object":
            out[parts[0]] = (float(parts[2]) / 100.0, float(parts[3]))
    return out


def write_distances_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "object_id", "symmetric", "add", "adds", "invisible_pct"])
        for r in records:
            w.writerow([r.scene, r.object_id, int(r.symmetric), repr(float(r.add)),
                        repr(float(r.adds)), repr(float(r.invisible_pct))])


def read_distances_csv(path):
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_occlusion_csv(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bucket_lower_pct", "accuracy_pct", "count"])
        for lo, acc, n in curve:
            w.writerow([repr(float(lo)), repr(float(acc)), n])


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def timing_summary(records):
    """Mean and standard deviation of seconds per stage over records."""
    stages = sorted({k for r in records for k in r.timings})
    out = {}
    for s in stages:
        v = np.array([r.timings.get(s, 0.0) for r in records])
        out[s] = {"mean": float(v.mean()), "std": float(v.std())}
    return out


def write_ppm(image, path):
    """Binary P6 PPM from an (H, W, 3) uint8 array."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def overlay(scene, models, poses):
    """Scene RGB with each object's model points drawn at its estimated pose."""
    img = (np.clip(scene.rgb, 0, 1) * 255).astype(np.uint8)
    H, W = img.shape[:2]
    for oid, pose in poses:
        pts = pose.apply(models[oid].surface_points)
        pts = pts[pts[:, 2] > 1e-6]
        if len(pts) == 0:
            continue
        uv = np.rint(project_points(scene.intrinsics, pts)[0]).astype(np.int64)
        ok = (uv[:, 0] >= 0) & (uv[:, 0] < W) & (uv[:, 1] >= 0) & (uv[:, 1] < H)
        img[uv[ok, 1], uv[ok, 0]] = OVERLAY_COLORS[int(oid) % len(OVERLAY_COLORS)]
    return img


def write_overlays(scenes, models, records, directory, variant, limit=None):
    """One PPM per scene with the recorded estimates drawn in; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    by_scene = {}
    for r in records:
        if r.estimate:
            by_scene.setdefault(r.scene, []).append((r.object_id, Pose.from_array(r.estimate)))
    paths = []
    for s_idx in sorted(by_scene)[:limit]:
        path = directory / f"scene_{s_idx:05d}_{variant}.ppm"
        write_ppm(overlay(scenes[s_idx], models, by_scene[s_idx]), path)
        paths.append(path)
    return paths


def write_loss_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "val_loss", "refiner_loss"])
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k]))
                                         for k in ("lr", "train_loss", "val_loss", "refiner_loss")])


def format_bench(stats):
    """Timing table: columns Seg, PE, Refine, ICP, ALL; rows mean and std (s/frame)."""
    cols = ["seg", "pe", "refine", "icp", "all"]
    names = ["Seg", "PE", "Refine", "ICP", "ALL"]
    lines = [f"{'':>6}" + "".join(f"{n:>12}" for n in names)]
    for label, fn in (("mean", np.mean), ("std", np.std)):
        lines.append(f"{label:>6}" + "".join(f"{fn(stats[c]):>12.6f}" for c in cols))
    lines.append(f"frames: {len(stats['all'])}")
    return "\n".join(lines) + "\n"
