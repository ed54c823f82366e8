"""The dense-fusion pose network: color and geometry embeddings, per-pixel fusion, pose heads.

Parameters live in a flat ``{name: Tensor}`` dict so they can be checkpointed,
optimised and gradient-checked uniformly. Three architectures share the
building blocks:

``per_pixel``  one pose + confidence per fused pixel, highest confidence wins
``single``     dense fusion, but one pose regressed from the pooled global feature
``global``     no pixel association: pooled image feature concatenated with the
               pooled geometry feature (PointFusion-style baseline)
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import Tensor, ops
from .exceptions import (EmptyCloud, EmptyMask, EmptyPredictionList, IndexOutOfBounds,
                         NoValidDepth, ShapeMismatch)
from .geometry import PointCloud, Pose, backproject_pixels

MODES = ("per_pixel", "single", "global")
TRANSLATION_MODES = ("absolute", "offset")


@dataclass
class NetworkConfig:
    d_rgb: int = 128
    d_geo: int = 128
    d_glob: int = 256
    n_points: int = 500
    n_loss: int = 0                      # N; 0 means "same as n_points"
    encoder_channels: tuple = (16, 32)
    geo_hidden: tuple = (64, 128)
    fuse_hidden: int = 256
    head_hidden: tuple = (128, 64)
    mode: str = "per_pixel"
    translation: str = "absolute"
    point_scale: float = 10.0            # centred points are multiplied by this before embedding
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.geo_hidden = tuple(self.geo_hidden)
        self.head_hidden = tuple(self.head_hidden)
        if self.d_rgb <= 0 or self.d_geo <= 0 or self.d_glob <= 0:
            raise ValueError("feature dimensions must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.translation not in TRANSLATION_MODES:
            raise ValueError(f"translation must be one of {TRANSLATION_MODES}")
        if len(self.encoder_channels) != 2 or len(self.geo_hidden) != 2:
            raise ValueError("encoder_channels and geo_hidden take exactly two widths")
        if self.n_sampled > self.n_points:
            raise ValueError("n_loss cannot exceed n_points")

    @property
    def n_sampled(self):
        return self.n_loss or self.n_points

    def to_dict(self):
        d = asdict(self)
        for k in ("encoder_channels", "geo_hidden", "head_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class PerPixelPrediction:
    rotation: np.ndarray
    translation: np.ndarray
    confidence: float

    def __post_init__(self):
        if not self.confidence > 0:
            raise ValueError("confidence must be strictly positive")

    @property
    def pose(self) -> Pose:
        return Pose(self.rotation, self.translation)


def glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _dense(params, rng, name, n_in, n_out):
    params[f"{name}.W"] = Tensor(glorot(rng, n_in, n_out, (n_in, n_out)), True, f"{name}.W")
    params[f"{name}.b"] = Tensor(np.zeros(n_out), True, f"{name}.b")


def _conv(params, rng, name, k, cin, cout):
    params[f"{name}.K"] = Tensor(glorot(rng, k * k * cin, k * k * cout, (k, k, cin, cout)),
                                 True, f"{name}.K")


def _mlp_params(params, rng, prefix, n_in, widths):
    for i, w in enumerate(widths):
        _dense(params, rng, f"{prefix}.{i}", n_in, w)
        n_in = w
    return n_in


def mlp(params, prefix, x, depth, final_relu=False):
    for i in range(depth):
        x = ops.linear(x, params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"])
        if i < depth - 1 or final_relu:
            x = ops.relu(x)
    return x


def _head_params(params, rng, prefix, n_in, hidden):
    n = _mlp_params(params, rng, prefix, n_in, hidden)
    _dense(params, rng, f"{prefix}.rot", n, 4)
    _dense(params, rng, f"{prefix}.trans", n, 3)
    _dense(params, rng, f"{prefix}.conf", n, 1)
    params[f"{prefix}.rot.b"].data[:] = [1.0, 0.0, 0.0, 0.0]


def init_params(config: NetworkConfig, prefix="") -> dict:
    """Fresh parameters: Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(config.seed)
    p = {}
    c1, c2 = config.encoder_channels
    _conv(p, rng, "cnn.conv0", 3, 3, c1)
    _conv(p, rng, "cnn.conv1", 3, c1, c2)
    _conv(p, rng, "cnn.conv2", 3, c2 + c1, config.d_rgb)
    g1, g2 = config.geo_hidden
    _mlp_params(p, rng, "geo.point", 3, (g1, g2))
    _dense(p, rng, "geo.out", 2 * g2, config.d_geo)
    if config.mode == "global":
        n_in = config.d_rgb + config.d_geo
    else:
        _mlp_params(p, rng, "fuse", config.d_rgb + config.d_geo, (config.fuse_hidden, config.d_glob))
        n_in = config.d_glob if config.mode == "single" else config.d_rgb + config.d_geo + config.d_glob
    _head_params(p, rng, "head", n_in, config.head_hidden)
    if prefix:
        p = {prefix + k: v for k, v in p.items()}
        for k, v in p.items():
            v.name = k
    return p


def embed_color(params, crop) -> Tensor:
    """Encoder-decoder mapping an (H, W, 3) crop to an (H, W, d_rgb) feature map.

    One stride-2 conv down, one nearest-neighbour upsample back, a skip
    connection from the full-resolution layer, then a crop to the input size.
    """
    crop = crop if isinstance(crop, Tensor) else Tensor(crop)
    if crop.data.ndim != 3 or crop.shape[2] != 3 or crop.shape[0] == 0 or crop.shape[1] == 0:
        raise ShapeMismatch(f"embed_color expects a non-empty (H, W, 3) crop, got {crop.shape}")
    h, w = crop.shape[:2]
    f0 = ops.relu(ops.conv2d(crop, params["cnn.conv0.K"]))
    f1 = ops.relu(ops.conv2d(f0, params["cnn.conv1.K"], stride=2))
    up = ops.crop2d(ops.upsample_nearest(f1, 2), h, w)
    return ops.relu(ops.conv2d(ops.concat([up, f0], axis=2), params["cnn.conv2.K"]))


def embed_geometry(params, points, return_pooled=False, prefix="geo"):
    """Per-point features (P, d_geo) from an average-pooled PointNet-style MLP."""
    pts = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=np.float64))
    if pts.data.ndim != 2 or pts.shape[1] != 3:
        raise ShapeMismatch(f"embed_geometry expects (P, 3) points, got {pts.shape}")
    if pts.shape[0] == 0:
        raise EmptyCloud("cannot embed an empty point cloud")
    h = mlp(params, f"{prefix}.point", pts, 2, final_relu=True)
    pooled = ops.mean_over_rows(h)
    out = ops.relu(ops.linear(ops.concat([h, ops.repeat_rows(pooled, pts.shape[0])], axis=1),
                              params[f"{prefix}.out.W"], params[f"{prefix}.out.b"]))
    return (out, pooled) if return_pooled else out


def _check_pixels(color_map, pixel_index):
    idx = np.asarray(pixel_index, dtype=np.int64).reshape(-1, 2)
    h, w = color_map.shape[:2]
    if idx.size and (idx.min() < 0 or idx[:, 0].max() >= h or idx[:, 1].max() >= w):
        raise IndexOutOfBounds(f"pixel_index outside the {h}x{w} color map")
    return idx


def fuse(params, color_map, geo_features, pixel_index, prefix="fuse"):
    """Pair each point's geometric feature with its pixel's color feature and add global context.

    Returns ``(per_pixel, global_feature)`` with per_pixel of shape
    (P, d_rgb + d_geo + d_glob).
    """
    idx = _check_pixels(color_map, pixel_index)
    if len(idx) != geo_features.shape[0]:
        raise ShapeMismatch(f"{len(idx)} pixel indices for {geo_features.shape[0]} points")
    colors = ops.gather_pixels(color_map, idx)
    pairs = ops.concat([colors, geo_features], axis=1)
    glob = ops.mean_over_rows(mlp(params, prefix, pairs, 2, final_relu=True))
    per_pixel = ops.concat([pairs, ops.repeat_rows(glob, len(idx))], axis=1)
    return per_pixel, glob


def _depth(params, prefix):
    n = 0
    while f"{prefix}.{n}.W" in params:
        n += 1
    return n


def pose_heads(params, features, prefix="head"):
    """Rotation (unit quaternion), translation and confidence for each feature row."""
    depth = _depth(params, prefix)
    h = mlp(params, prefix, features, depth, final_relu=True)
    quat = ops.normalize_quaternion(ops.linear(h, params[f"{prefix}.rot.W"], params[f"{prefix}.rot.b"]))
    trans = ops.linear(h, params[f"{prefix}.trans.W"], params[f"{prefix}.trans.b"])
    conf = ops.clamp_min(ops.sigmoid(ops.linear(h, params[f"{prefix}.conf.W"],
                                                params[f"{prefix}.conf.b"])), ops.CONFIDENCE_FLOOR)
    return quat, trans, ops.reshape(conf, (features.shape[0],))


def normalize_points(points, scale):
    """Centre a cloud on its centroid and rescale; returns ``(normalised, centroid)``."""
    points = np.asarray(points, dtype=np.float64)
    centroid = points.mean(axis=0)
    return (points - centroid) * scale, centroid


def forward(params, config: NetworkConfig, crop, points, pixel_index, color_map=None):
    """Run the network on one object; returns a dict of tensors.

    The cloud is centred on its centroid and scaled by ``point_scale`` before
    embedding; translations are mapped back to the camera frame, either as
    centroid + head output (``absolute``) or, per pixel, as that pixel's point +
    head output (``offset``).

    Keys: ``quat`` (n, 4), ``trans`` (n, 3), ``conf`` (n,), ``color_map``, and
    ``global`` (the pooled fused feature, absent for the ``global`` mode).
    ``n`` is P for per-pixel mode and 1 otherwise.
    """
    if color_map is None:
        color_map = embed_color(params, crop)
    local, centroid = normalize_points(points, config.point_scale)
    pts = Tensor(local)
    out = {"color_map": color_map}
    if config.mode == "global":
        h, w, c = color_map.shape
        img = ops.mean_over_rows(ops.reshape(color_map, (h * w, c)))
        geo = ops.mean_over_rows(embed_geometry(params, pts))
        feat = ops.reshape(ops.concat([img, geo], axis=0), (1, c + config.d_geo))
    else:
        geo = embed_geometry(params, pts)
        per_pixel, glob = fuse(params, color_map, geo, pixel_index)
        out["global"] = glob
        feat = per_pixel if config.mode == "per_pixel" else ops.reshape(glob, (1, glob.shape[0]))
    quat, trans, conf = pose_heads(params, feat)
    anchor = np.broadcast_to(centroid, (trans.shape[0], 3))
    if config.translation == "offset" and config.mode == "per_pixel":
        anchor = np.asarray(points, dtype=np.float64)
    trans = ops.add(ops.scale(trans, 1.0 / config.point_scale), Tensor(anchor))
    out.update(quat=quat, trans=trans, conf=conf)
    return out


def predict(params, per_pixel_fused, points=None, translation="absolute"):
    """Apply the pose heads row-wise to fused features and package the results."""
    feat = per_pixel_fused if isinstance(per_pixel_fused, Tensor) else Tensor(per_pixel_fused)
    quat, trans, conf = pose_heads(params, feat)
    t = trans.data
    if translation == "offset":
        t = t + np.asarray(points)
    return to_predictions(quat.data, t, conf.data)


def to_predictions(quat, trans, conf):
    return [PerPixelPrediction(quat[i].copy(), trans[i].copy(), float(conf[i])) for i in range(len(conf))]


def select_best(predictions) -> Pose:
    """Pose of the most confident prediction; ties go to the lowest index."""
    if len(predictions) == 0:
        raise EmptyPredictionList("no predictions to choose from")
    conf = np.array([p.confidence for p in predictions])
    return predictions[int(np.argmax(conf))].pose


@dataclass
class ObjectInputs:
    crop: np.ndarray            # (h, w, 3) centred RGB
    cloud: PointCloud           # camera-frame points, pixel_index relative to the crop
    bbox: tuple                 # (row0, row1, col0, col1), inclusive-exclusive


def prepare_inputs(scene, mask, n_points, rng) -> ObjectInputs:
    """Crop the mask's bounding box and sample ``n_points`` masked pixels with valid depth.

    Sampling is without replacement when enough pixels are available and with
    replacement otherwise.
    """
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise EmptyMask("mask has no pixels")
    valid = mask & (scene.depth > 0)
    rows, cols = np.nonzero(valid)
    if len(rows) == 0:
        raise NoValidDepth("no masked pixel has a depth return")
    mr, mc = np.nonzero(mask)
    r0, r1, c0, c1 = mr.min(), mr.max() + 1, mc.min(), mc.max() + 1
    replace = len(rows) < n_points
    pick = rng.choice(len(rows), size=n_points, replace=replace)
    if not replace:
        pick = np.sort(pick)
    pix = np.stack([rows[pick], cols[pick]], axis=1)
    points = backproject_pixels(scene.intrinsics, pix, scene.depth[pix[:, 0], pix[:, 1]])
    crop = scene.rgb[r0:r1, c0:c1] - 0.5
    colors = scene.rgb[pix[:, 0], pix[:, 1]]
    cloud = PointCloud(points, colors, pix - np.array([r0, c0]))
    return ObjectInputs(crop, cloud, (int(r0), int(r1), int(c0), int(c1)))


def estimate(scene, object_id, mask, params, config: NetworkConfig, rng=None):
    """Full single-object inference: ``(pose, predictions, color_map, inputs)``."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    inputs = prepare_inputs(scene, mask, config.n_points, rng)
    out = forward(params, config, inputs.crop, inputs.cloud.points, inputs.cloud.pixel_index)
    preds = to_predictions(out["quat"].data, out["trans"].data, out["conf"].data)
    return select_best(preds), preds, out["color_map"], inputs
