"""Synthetic RGB-D scenes: z-buffer point splatting, occluders, mask corruption."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..exceptions import ObjectBehindCamera
from ..geometry import CameraIntrinsics, Pose

# splat points per pixel footprint (at the object's nearest depth)
SPLAT_DENSITY = 6.0


@dataclass
class Scene:
    rgb: np.ndarray                 # (H, W, 3) in [0, 1]
    depth: np.ndarray               # (H, W) meters, 0 = no return
    masks: np.ndarray               # (n_objects, H, W) uint8
    object_ids: list
    gt_poses: list
    intrinsics: CameraIntrinsics
    symmetric: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def n_objects(self):
        return len(self.object_ids)

    def mask_of(self, object_id) -> np.ndarray:
        return self.masks[self.object_ids.index(object_id)].astype(bool)

    def pose_of(self, object_id) -> Pose:
        return self.gt_poses[self.object_ids.index(object_id)]


def _splat(points, colors, labels, intrinsics, normals=None):
    """Nearest-depth-wins point splatting; returns (depth, rgb, label) images, label -1 = empty.

    With ``normals`` the winner's depth is moved to where the pixel-centre ray
    meets its tangent plane, so flat faces render exact depth.
    """
    H, W = intrinsics.height, intrinsics.width
    z = points[:, 2]
    u = np.rint(intrinsics.fx * points[:, 0] / z + intrinsics.cx).astype(np.int64)
    v = np.rint(intrinsics.fy * points[:, 1] / z + intrinsics.cy).astype(np.int64)
    ok = (u >= 0) & (u < W) & (v >= 0) & (v < H)
    u, v, z, colors, labels = u[ok], v[ok], z[ok], colors[ok], labels[ok]
    points = points[ok]
    normals = normals[ok] if normals is not None else None
    pix = v * W + u
    order = np.lexsort((z, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]
    depth = np.zeros(H * W)
    rgb = np.zeros((H * W, 3))
    label = np.full(H * W, -1, dtype=np.int64)
    zw = z[win]
    if normals is not None:
        ray = np.stack([(u[win] - intrinsics.cx) / intrinsics.fx, (v[win] - intrinsics.cy) / intrinsics.fy,
                        np.ones(len(win))], axis=1)
        n = normals[win]
        cos = np.sum(n * ray, axis=1)
        plane = np.sum(n * points[win], axis=1)
        hit = np.abs(cos) > 0.2 * np.linalg.norm(ray, axis=1)
        zw = np.where(hit, plane / np.where(hit, cos, 1.0), zw)
    depth[pix[win]] = zw
    rgb[pix[win]] = colors[win]
    label[pix[win]] = labels[win]
    return depth.reshape(H, W), rgb.reshape(H, W, 3), label.reshape(H, W)


def render_scene(models, poses, intrinsics=None, occluder_fraction=0.0, seed=0,
                 depth_noise=0.001, dropout=0.01, background_depth=1.5) -> Scene:
    """Render objects at ``poses`` into an RGB-D frame with ground-truth masks.

    ``occluder_fraction`` in [0, 1] places, for each object, a flat occluder
    slightly in front of it that hides that fraction of the pixels the object
    would otherwise show. ``background_depth`` adds a textured fronto-parallel
    wall (None for no wall). Depth noise is Gaussian with sigma ``depth_noise``
    meters plus ``dropout`` fraction of pixels set to no-return.
    """
    intrinsics = intrinsics or CameraIntrinsics()
    if not 0.0 <= occluder_fraction <= 1.0:
        raise ValueError("occluder_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    H, W = intrinsics.height, intrinsics.width

    all_pts, all_cols, all_lab, all_nrm = [], [], [], []
    for i, (model, pose) in enumerate(zip(models, poses)):
        centre_z = pose.translation[2]
        if centre_z - model.radius <= 0:
            raise ObjectBehindCamera(f"object {model.id} is not fully in front of the camera")
        zmin = centre_z - model.radius
        footprint = (zmin / intrinsics.fx) * (zmin / intrinsics.fy)
        n = int(np.clip(SPLAT_DENSITY * model.surface_area() / footprint, 2000, 400000))
        local = model.sample_surface(n, rng)
        pts = pose.apply(local)
        # back-face culling keeps far-side points from showing through splat gaps
        normals = model.normals_at(local) @ pose.matrix.T
        front = np.sum(normals * pts, axis=1) < 0
        local, pts, normals, n = local[front], pts[front], normals[front], int(front.sum())
        all_nrm.append(normals)
        all_pts.append(pts)
        all_cols.append(model.color_at(local))
        all_lab.append(np.full(n, i))
    if all_pts:
        depth, rgb, label = _splat(np.concatenate(all_pts), np.concatenate(all_cols),
                                   np.concatenate(all_lab), intrinsics, np.concatenate(all_nrm))
    else:
        depth, rgb, label = np.zeros((H, W)), np.zeros((H, W, 3)), np.full((H, W), -1)

    if background_depth is not None:
        empty = label < 0
        bg_rgb = 0.5 + 0.15 * rng.standard_normal((H, W, 1)) + 0.05 * rng.standard_normal((H, W, 3))
        depth = np.where(empty, background_depth, depth)
        rgb = np.where(empty[..., None], np.clip(bg_rgb, 0, 1), rgb)

    masks = np.stack([(label == i) for i in range(len(models))]).astype(np.uint8) \
        if len(models) else np.zeros((0, H, W), dtype=np.uint8)

    if occluder_fraction > 0 and len(models):
        rows, cols = np.mgrid[0:H, 0:W]
        visible = [m.astype(bool).copy() for m in masks]
        for i in range(len(models)):
            vis = visible[i]
            if not vis.any():
                continue
            theta = rng.uniform(0, 2 * np.pi)
            direction = np.array([np.cos(theta), np.sin(theta)])
            proj = rows * direction[0] + cols * direction[1]
            thr = np.quantile(proj[vis], 1.0 - occluder_fraction)
            r0, r1 = np.where(vis.any(axis=1))[0][[0, -1]]
            c0, c1 = np.where(vis.any(axis=0))[0][[0, -1]]
            box = (rows >= r0 - 2) & (rows <= r1 + 2) & (cols >= c0 - 2) & (cols <= c1 + 2)
            cover = box & (proj >= thr) if occluder_fraction < 1.0 else box
            occ_depth = max(0.1, float(depth[vis].min()) - 0.05)
            cover &= (depth == 0) | (depth > occ_depth)
            shade = rng.uniform(0.2, 0.8, size=3)
            depth = np.where(cover, occ_depth, depth)
            rgb = np.where(cover[..., None], shade, rgb)
            masks[:, cover] = 0

    if depth_noise > 0:
        has = depth > 0
        depth = np.where(has, depth + depth_noise * rng.standard_normal((H, W)), 0.0)
        depth = np.where(depth > 0, depth, 0.0)
    if dropout > 0:
        depth = np.where(rng.uniform(size=(H, W)) < dropout, 0.0, depth)

    return Scene(
        rgb=rgb, depth=depth, masks=masks,
        object_ids=[int(m.id) for m in models], gt_poses=list(poses), intrinsics=intrinsics,
        symmetric=[bool(m.symmetric) for m in models],
        meta={"occluder_fraction": float(occluder_fraction), "seed": int(seed)},
    )


def corrupt_mask(mask, dilation_px=0, leak_fraction=0.0, seed=0) -> np.ndarray:
    """Simulate segmentation error: dilate, then switch on a fraction of the border ring.

    The ring is the set of background pixels 8-adjacent to the dilated mask;
    exactly ``round(leak_fraction * ring size)`` of them are flipped.
    """
    mask = np.asarray(mask).astype(bool)
    out = mask.copy()
    struct = np.ones((3, 3), dtype=bool)
    if dilation_px > 0 and out.any():
        out = ndimage.binary_dilation(out, structure=struct, iterations=int(dilation_px))
    if leak_fraction > 0 and out.any():
        ring = ndimage.binary_dilation(out, structure=struct) & ~out
        idx = np.flatnonzero(ring)
        k = int(round(leak_fraction * len(idx)))
        if k:
            rng = np.random.default_rng(seed)
            out.flat[rng.choice(idx, size=k, replace=False)] = True
    return out.astype(np.asarray(mask).dtype) if np.asarray(mask).dtype != bool else out
