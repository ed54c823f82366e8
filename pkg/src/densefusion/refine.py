"""Iterative residual pose refinement.

Each iteration re-expresses the observed cloud in the current estimate's
object frame, re-embeds it, fuses it with the main network's color map and
regresses a residual pose from the pooled fused feature. The residual is a
correction expressed in that object frame, so it composes on the right of the
running estimate.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import Tape, Tensor, adam_step, backward, collect_grads, ops, zero_grads
from .exceptions import EmptyCloud
from .geometry import Pose, compose, inverse, perturb_pose
from .loss import pose_loss
from .network import NetworkConfig, _dense, _mlp_params, embed_geometry, fuse, glorot, mlp

PREFIX = "ref"
# object-frame coordinates are multiplied by this before embedding and the
# translation head's output divided by it, as in the main network
POINT_SCALE = 10.0


@dataclass
class RefinerConfig:
    K: int = 2
    hidden: tuple = (256, 128, 64)     # three hidden layers + the output layer
    d_geo: int = 128
    geo_hidden: tuple = (64, 128)
    fuse_hidden: int = 256
    d_glob: int = 256
    start_epoch: int = 10
    plateau_patience: int = 5
    plateau_tol: float = 0.01
    # curriculum: perturbation magnitude annealed from start to end over training
    perturb_start: tuple = (20.0, 0.03)   # degrees, meters
    perturb_end: tuple = (5.0, 0.01)
    seed: int = 1

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.geo_hidden = tuple(self.geo_hidden)
        self.perturb_start = tuple(self.perturb_start)
        self.perturb_end = tuple(self.perturb_end)
        if self.K < 0:
            raise ValueError("K must be non-negative")

    def to_dict(self):
        d = asdict(self)
        for k in ("hidden", "geo_hidden", "perturb_start", "perturb_end"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class RefinementTrace:
    residuals: list = field(default_factory=list)
    estimates: list = field(default_factory=list)   # estimates[0] is the initial pose


def init_refiner_params(config: RefinerConfig, d_rgb: int) -> dict:
    """Refiner weights; the residual head starts as the identity transform."""
    rng = np.random.default_rng(config.seed)
    p = {}
    g1, g2 = config.geo_hidden
    _mlp_params(p, rng, f"{PREFIX}.geo.point", 3, (g1, g2))
    _dense(p, rng, f"{PREFIX}.geo.out", 2 * g2, config.d_geo)
    _mlp_params(p, rng, f"{PREFIX}.fuse", d_rgb + config.d_geo, (config.fuse_hidden, config.d_glob))
    n = _mlp_params(p, rng, f"{PREFIX}.mlp", config.d_glob, config.hidden)
    _dense(p, rng, f"{PREFIX}.rot", n, 4)
    _dense(p, rng, f"{PREFIX}.trans", n, 3)
    p[f"{PREFIX}.rot.W"].data[:] = 0.0
    p[f"{PREFIX}.rot.b"].data[:] = [1.0, 0.0, 0.0, 0.0]
    p[f"{PREFIX}.trans.W"].data[:] = 0.0
    return p


def residual_tensors(params, points, color_map, pixel_index, current: Pose):
    """Differentiable residual (quat (1, 4), trans (1, 3)) for one refinement iteration."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise EmptyCloud("refinement needs at least one observed point")
    local = inverse(current).apply(points) * POINT_SCALE
    cmap = Tensor(color_map.data if isinstance(color_map, Tensor) else color_map)
    geo = embed_geometry(params, Tensor(local), prefix=f"{PREFIX}.geo")
    _, glob = fuse(params, cmap, geo, pixel_index, prefix=f"{PREFIX}.fuse")
    depth = 0
    while f"{PREFIX}.mlp.{depth}.W" in params:
        depth += 1
    h = mlp(params, f"{PREFIX}.mlp", ops.reshape(glob, (1, glob.shape[0])), depth, final_relu=True)
    quat = ops.normalize_quaternion(ops.linear(h, params[f"{PREFIX}.rot.W"], params[f"{PREFIX}.rot.b"]))
    trans = ops.scale(ops.linear(h, params[f"{PREFIX}.trans.W"], params[f"{PREFIX}.trans.b"]),
                      1.0 / POINT_SCALE)
    return quat, trans


def refine_step(params, points, color_map, pixel_index, current: Pose) -> Pose:
    """Residual pose predicted against ``current`` for camera-frame ``points``."""
    quat, trans = residual_tensors(params, points, color_map, pixel_index, current)
    return Pose(quat.data[0], trans.data[0])


def refine(initial: Pose, params, points, color_map, pixel_index, K=2):
    """Apply K refinement iterations; returns ``(final pose, trace)``.

    estimate_k = estimate_{k-1} composed with residual_k (residual applied first).
    """
    trace = RefinementTrace(estimates=[initial])
    current = initial
    for _ in range(K):
        residual = refine_step(params, points, color_map, pixel_index, current)
        current = compose(current, residual)
        trace.residuals.append(residual)
        trace.estimates.append(current)
    return current, trace


def compose_trace(initial: Pose, residuals) -> Pose:
    """initial * r_1 * ... * r_K."""
    out = initial
    for r in residuals:
        out = compose(out, r)
    return out


def refiner_gate(epoch, val_losses, config: RefinerConfig) -> bool:
    """True once joint refiner training may start.

    Opens at ``start_epoch`` or earlier if the main network's validation loss
    improved by less than ``plateau_tol`` (relative) over the last
    ``plateau_patience`` epochs.
    """
    if epoch >= config.start_epoch:
        return True
    n = config.plateau_patience
    if len(val_losses) > n:
        old, new = val_losses[-n - 1], val_losses[-1]
        if old > 0 and (old - new) / old < config.plateau_tol:
            return True
    return False


def curriculum(progress: float, config: RefinerConfig):
    """(max angle in radians, max offset in meters) at training progress in [0, 1]."""
    a = np.clip(progress, 0.0, 1.0)
    deg = (1 - a) * config.perturb_start[0] + a * config.perturb_end[0]
    dist = (1 - a) * config.perturb_start[1] + a * config.perturb_end[1]
    return np.deg2rad(deg), dist


def refiner_loss(params, config: RefinerConfig, points, color_map, pixel_index, initial: Pose,
                 gt: Pose, model_points, symmetric):
    """Sum over iterations of the pose loss of each composed estimate (run under a Tape).

    Earlier estimates enter the next iteration as constants.
    """
    current = initial
    total = None
    for _ in range(config.K):
        quat, trans = residual_tensors(params, points, color_map, pixel_index, current)
        # loss of current * residual against gt equals loss of residual against inv(current) * gt
        target = compose(inverse(current), gt)
        term = ops.mean(pose_loss(model_points, target, quat, trans, symmetric))
        total = term if total is None else ops.add(total, term)
        current = compose(current, Pose(quat.data[0], trans.data[0]))
    return total, current


def refiner_training_step(instances, params, state, config: RefinerConfig, lr):
    """One Adam step on the refiner parameters only.

    ``instances`` are dicts with keys points, color_map, pixel_index, initial,
    gt, model_points, symmetric.
    """
    zero_grads(params)
    with Tape() as tape:
        total = None
        for inst in instances:
            loss, _ = refiner_loss(params, config, inst["points"], inst["color_map"], inst["pixel_index"],
                                   inst["initial"], inst["gt"], inst["model_points"], inst["symmetric"])
            total = loss if total is None else ops.add(total, loss)
    backward(total, tape)
    adam_step(params, collect_grads(params), state, lr=lr)
    return float(total.data)


def make_initial(gt: Pose, predicted: Pose, rng, progress, config: RefinerConfig):
    """Refiner training start pose: the network's prediction or a curriculum perturbation of gt."""
    if predicted is not None and rng.uniform() < 0.5:
        return predicted
    angle, dist = curriculum(progress, config)
    return perturb_pose(gt, rng, angle, dist)
