"""Per-pixel pose losses and the confidence-weighted training objective."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import Tape, Tensor, adam_step, backward, collect_grads, ops, zero_grads
from .exceptions import LengthMismatch, NonPositiveConfidence
from .geometry import Pose
from .network import forward, prepare_inputs


@dataclass
class LossConfig:
    w: float = 0.01
    n_loss: int = 0          # N sampled dense pixels; 0 = all P predictions
    n_model_points: int = 200

    def __post_init__(self):
        if not self.w > 0:
            raise ValueError("w must be positive")
        if self.n_model_points < 1 or self.n_loss < 0:
            raise ValueError("N and M must be at least 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _as_batch(pred):
    """(quat (n, 4), trans (n, 3)) tensors from a Pose or a tensor pair."""
    if isinstance(pred, Pose):
        return Tensor(pred.rotation[None, :]), Tensor(pred.translation[None, :])
    quat, trans = pred
    return quat, trans


def _gt_points(points, gt: Pose):
    return gt.apply(points)


def add_loss(points, gt: Pose, quat, trans):
    """Mean matched-point distance for each of n predicted poses; returns an (n,) tensor."""
    R = ops.quat_to_rotmat(quat)
    moved = ops.rigid_transform(R, trans, Tensor(points))
    diff = ops.sub(moved, Tensor(_gt_points(points, gt)))
    return ops.mean(ops.norm_last(diff), axis=1)


def _nearest_pred_index(gt_pts, pred_pts):
    """For each ground-truth point, index of the closest predicted point (per pose)."""
    # squared distances via |a|^2 + |b|^2 - 2ab, one (m, m) block per pose
    g2 = np.sum(gt_pts * gt_pts, axis=1)
    p2 = np.sum(pred_pts * pred_pts, axis=2)
    cross = np.matmul(pred_pts, gt_pts.T)              # (n, m_pred, m_gt)
    d2 = g2[None, None, :] + p2[:, :, None] - 2 * cross
    return np.argmin(d2, axis=1)


def adds_loss(points, gt: Pose, quat, trans):
    """Mean closest-point distance for each of n predicted poses; returns an (n,) tensor.

    Each ground-truth point is matched to the nearest predicted point; the
    matching is held constant during backpropagation.
    """
    R = ops.quat_to_rotmat(quat)
    gt_pts = _gt_points(points, gt)
    pred_pts = np.matmul(points, np.swapaxes(R.data, 1, 2)) + trans.data[:, None, :]
    idx = _nearest_pred_index(gt_pts, pred_pts)
    matched_model = np.asarray(points)[idx]            # (n, m, 3)
    moved = ops.rigid_transform(R, trans, Tensor(matched_model))
    return ops.mean(ops.norm_last(ops.sub(moved, Tensor(gt_pts))), axis=1)


def add_loss_per_pixel(model, gt: Pose, pred):
    """Eq-1 style loss for one prediction (Pose or (quat, trans) tensors of one row)."""
    quat, trans = _as_batch(pred)
    return ops.reshape(add_loss(model.surface_points, gt, quat, trans), ())


def adds_loss_per_pixel(model, gt: Pose, pred):
    quat, trans = _as_batch(pred)
    return ops.reshape(adds_loss(model.surface_points, gt, quat, trans), ())


def pose_loss(points, gt, quat, trans, symmetric, hook=None):
    """Route to the symmetric or asymmetric per-pixel loss."""
    if hook is not None:
        hook("adds" if symmetric else "add")
    return (adds_loss if symmetric else add_loss)(points, gt, quat, trans)


def total_loss(per_pixel_losses, confidences, w=0.01):
    """mean_i(L_i * c_i - w * log c_i)."""
    L = per_pixel_losses if isinstance(per_pixel_losses, Tensor) else Tensor(per_pixel_losses)
    c = confidences if isinstance(confidences, Tensor) else Tensor(confidences)
    if L.shape != c.shape or L.data.ndim != 1:
        raise LengthMismatch(f"{L.shape} losses vs {c.shape} confidences")
    if np.any(c.data <= 0):
        raise NonPositiveConfidence("confidences must be strictly positive")
    return ops.mean(ops.sub(ops.mul(L, c), ops.scale(ops.log(c), w)))


def object_loss(params, net_config, loss_config, scene, index, model, rng, mask=None, hook=None):
    """Training objective for one object instance of ``scene`` (must run under a Tape).

    Per-pixel networks use the confidence-weighted objective over N sampled
    predictions; single-output networks use the plain pose loss.
    """
    mask = scene.masks[index] if mask is None else mask
    inputs = prepare_inputs(scene, mask, net_config.n_points, rng)
    out = forward(params, net_config, inputs.crop, inputs.cloud.points, inputs.cloud.pixel_index)
    m = min(loss_config.n_model_points, model.n_points)
    pts = model.surface_points[np.sort(rng.choice(model.n_points, size=m, replace=False))]
    quat, trans, conf = out["quat"], out["trans"], out["conf"]
    n_pred = quat.shape[0]
    n = loss_config.n_loss or net_config.n_sampled
    if n_pred > 1 and n < n_pred:
        pick = np.sort(rng.choice(n_pred, size=n, replace=False))
        quat, trans, conf = ops.gather_rows(quat, pick), ops.gather_rows(trans, pick), ops.gather_rows(conf, pick)
    gt = scene.gt_poses[index]
    per_pixel = pose_loss(pts, gt, quat, trans, bool(model.symmetric), hook)
    if net_config.mode == "per_pixel":
        return total_loss(per_pixel, conf, loss_config.w), per_pixel
    return ops.mean(per_pixel), per_pixel


def training_step(scenes, params, state, net_config, loss_config, models, lr, rng,
                  mask_fn=None, hook=None):
    """One Adam step on the objective summed over every object in ``scenes``.

    ``models`` maps object id to ObjectModel; ``mask_fn(scene, index)`` may
    substitute a corrupted mask. Returns ``(params, loss value)``.
    """
    if not scenes:
        raise ValueError("training batch is empty")
    zero_grads(params)
    with Tape() as tape:
        terms = []
        for scene in scenes:
            for i, oid in enumerate(scene.object_ids):
                mask = mask_fn(scene, i) if mask_fn else scene.masks[i]
                if not np.any(np.asarray(mask).astype(bool) & (scene.depth > 0)):
                    continue
                loss, _ = object_loss(params, net_config, loss_config, scene, i, models[oid], rng,
                                      mask=mask, hook=hook)
                terms.append(loss)
        if not terms:
            return params, float("nan")
        total = terms[0]
        for t in terms[1:]:
            total = ops.add(total, t)
    backward(total, tape)
    if lr != 0:
        adam_step(params, collect_grads(params), state, lr=lr)
    return params, float(total.data)
