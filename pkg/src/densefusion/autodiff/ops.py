"""Differentiable operations on :class:`Tensor`.

Every op checks shapes up front and raises :class:`ShapeMismatch` naming the
offending shapes. Broadcasting is limited to a trailing-shape operand (bias
addition and the like).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import IndexOutOfBounds, ShapeMismatch
from .tensor import Tensor, as_tensor, record

CONFIDENCE_FLOOR = 1e-6


def _trailing_broadcastable(big, small):
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _reduce_to(grad, shape):
    if grad.shape == tuple(shape):
        return grad
    lead = grad.ndim - len(shape)
    return grad.reshape((-1,) + tuple(shape)).sum(axis=0) if lead else grad


def _binary_shapes(a, b, name):
    if a.shape == b.shape or _trailing_broadcastable(a.shape, b.shape) \
            or _trailing_broadcastable(b.shape, a.shape):
        return
    raise ShapeMismatch(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return record(a.data + b.data, (a, b),
                  lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return record(a.data - b.data, (a, b),
                  lambda g: (_reduce_to(g, a.shape), -_reduce_to(g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    return record(a.data * b.data, (a, b),
                  lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)), "mul")


def scale(a, c: float):
    a = as_tensor(a)
    return record(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b):
    """2-D matrix product, or a batched product when both operands are 3-D."""
    a, b = as_tensor(a), as_tensor(b)
    ok = (a.data.ndim == b.data.ndim and a.data.ndim in (2, 3) and a.shape[-1] == b.shape[-2]
          and (a.data.ndim == 2 or a.shape[0] == b.shape[0]))
    if not ok:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return record(a.data @ b.data, (a, b), back, "matmul")


def linear(x, W, b):
    """``x @ W + b`` for x (n, in), W (in, out), b (out,)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1 \
            or x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"linear: x {x.shape}, W {W.shape}, b {b.shape}")

    def back(g):
        return g @ W.data.T, x.data.T @ g, g.sum(axis=0)

    return record(x.data @ W.data + b.data, (x, W, b), back, "linear")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    x = as_tensor(x)
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    y[~pos] = e / (1.0 + e)
    return record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def clamp_min(x, floor: float):
    x = as_tensor(x)
    keep = x.data >= floor
    return record(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,), "clamp_min")


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value")
    return record(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].data.ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.data.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeMismatch(f"concat: shapes {[t.shape for t in tensors]} along axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=ax))

    return record(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), back, "concat")


def mean_over_rows(x):
    """Column means of an (n, d) tensor; the average-pooling reduction."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise ShapeMismatch(f"mean_over_rows expects a non-empty (n, d) tensor, got {x.shape}")
    n = x.shape[0]
    return record(x.data.mean(axis=0), (x,),
                  lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "mean_over_rows")


def repeat_rows(x, n: int):
    """Tile a (d,) vector into (n, d)."""
    x = as_tensor(x)
    if x.data.ndim != 1:
        raise ShapeMismatch(f"repeat_rows expects a vector, got {x.shape}")
    return record(np.broadcast_to(x.data, (n, x.shape[0])).copy(), (x,),
                  lambda g: (g.sum(axis=0),), "repeat_rows")


def sum(x, axis=None):
    x = as_tensor(x)

    def back(g):
        if axis is None:
            return (np.full(x.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return record(np.asarray(x.data.sum(axis=axis)), (x,), back, "sum")


def mean(x, axis=None):
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {shape}") from None
    return record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def gather_rows(x, index):
    """Rows ``x[index]`` for integer ``index``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexOutOfBounds(f"gather_rows: index outside [0, {x.shape[0]})")

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return record(x.data[index], (x,), back, "gather_rows")


def gather_pixels(feature_map, pixel_index):
    """Rows ``feature_map[r, c]`` for each (r, c) in ``pixel_index``."""
    fm = as_tensor(feature_map)
    if fm.data.ndim != 3:
        raise ShapeMismatch(f"gather_pixels expects an (h, w, c) map, got {fm.shape}")
    h, w, c = fm.shape
    idx = np.asarray(pixel_index, dtype=np.int64).reshape(-1, 2)
    if idx.size and (idx[:, 0].min() < 0 or idx[:, 0].max() >= h
                     or idx[:, 1].min() < 0 or idx[:, 1].max() >= w):
        raise IndexOutOfBounds(f"pixel index outside feature map of size {h}x{w}")
    return gather_rows(reshape(fm, (h * w, c)), idx[:, 0] * w + idx[:, 1])


def crop2d(x, height: int, width: int):
    """Top-left ``height x width`` window of an (h, w, c) map."""
    x = as_tensor(x)
    if x.data.ndim != 3 or height > x.shape[0] or width > x.shape[1]:
        raise ShapeMismatch(f"crop2d: cannot take {height}x{width} from {x.shape}")

    def back(g):
        out = np.zeros_like(x.data)
        out[:height, :width] = g
        return (out,)

    return record(x.data[:height, :width].copy(), (x,), back, "crop2d")


def conv2d(x, kernels, stride: int = 1):
    """Zero-padded 'same' convolution of an (h, w, cin) map with (k, k, cin, cout) kernels.

    Output spatial size is ``ceil(h / stride) x ceil(w / stride)``. Odd k only.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.data.ndim != 3 or kernels.data.ndim != 4 or kernels.shape[0] != kernels.shape[1] \
            or kernels.shape[2] != x.shape[2]:
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernels {kernels.shape}")
    k = kernels.shape[0]
    if k % 2 == 0:
        raise ShapeMismatch(f"conv2d: kernel size must be odd, got {k}")
    h, w, cin = x.shape
    cout = kernels.shape[3]
    p = k // 2
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0)))
    # windows: (h, w, cin, k, k) -> keep strided positions
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
    ho, wo = win.shape[:2]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, k * k * cin)
    Wm = kernels.data.reshape(k * k * cin, cout)
    out = (cols @ Wm).reshape(ho, wo, cout)

    def back(g):
        g2 = g.reshape(ho * wo, cout)
        gW = (cols.T @ g2).reshape(kernels.shape)
        dcols = (g2 @ Wm.T).reshape(ho, wo, k, k, cin)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j, :]
        return dxp[p:p + h, p:p + w], gW

    return record(out, (x, kernels), back, "conv2d")


def upsample_nearest(x, factor: int):
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeMismatch(f"upsample_nearest expects an (h, w, c) map, got {x.shape}")
    h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=0), factor, axis=1)
    return record(out, (x,),
                  lambda g: (g.reshape(h, factor, w, factor, c).sum(axis=(1, 3)),), "upsample_nearest")


def normalize_quaternion(x):
    """Row-wise unit normalisation of (n, 4) quaternions."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != 4:
        raise ShapeMismatch(f"normalize_quaternion expects (n, 4), got {x.shape}")
    norm = np.linalg.norm(x.data, axis=1, keepdims=True)
    norm = np.maximum(norm, 1e-12)
    y = x.data / norm

    def back(g):
        return ((g - y * np.sum(y * g, axis=1, keepdims=True)) / norm,)

    return record(y, (x,), back, "normalize_quaternion")


def quat_to_rotmat(q):
    """(n, 4) quaternions (w, x, y, z) to (n, 3, 3) rotation matrices.

    Uses the homogeneous-free form, so inputs should already be unit length.
    """
    q = as_tensor(q)
    if q.data.ndim != 2 or q.shape[1] != 4:
        raise ShapeMismatch(f"quat_to_rotmat expects (n, 4), got {q.shape}")
    w, x, y, z = q.data.T
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)

    def back(G):
        g = G
        gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0]
                  - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
        gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
                  - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
        gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
                  + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
        gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
                  - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
        return (np.stack([gw, gx, gy, gz], axis=1),)

    return record(R, (q,), back, "quat_to_rotmat")


def rigid_transform(R, t, points):
    """Apply n rigid transforms to model points.

    R (n, 3, 3), t (n, 3); points (m, 3) shared by all transforms or (n, m, 3)
    per transform. Returns (n, m, 3).
    """
    R, t, X = as_tensor(R), as_tensor(t), as_tensor(points)
    n = R.shape[0]
    if R.data.ndim != 3 or R.shape[1:] != (3, 3) or t.shape != (n, 3) \
            or not (X.data.ndim == 2 and X.shape[1] == 3 or X.data.ndim == 3 and X.shape[0] == n
                    and X.shape[2] == 3):
        raise ShapeMismatch(f"rigid_transform: R {R.shape}, t {t.shape}, points {X.shape}")
    shared = X.data.ndim == 2
    Rt = np.swapaxes(R.data, 1, 2)
    out = np.matmul(X.data, Rt) + t.data[:, None, :]

    def back(g):
        gT = np.swapaxes(g, 1, 2)                      # (n, 3, m)
        gR = gT @ X.data                                # (n, 3, 3)
        gX = np.matmul(g, R.data)                       # (n, m, 3)
        if shared:
            gX = gX.sum(axis=0)
        return gR, g.sum(axis=1), gX

    return record(out, (R, t, X), back, "rigid_transform")


def norm_last(x):
    """Euclidean norm over the last axis; zero-length vectors get a zero subgradient."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=-1))

    def back(g):
        safe = np.where(n > 0, n, 1.0)
        coef = np.where(n > 0, g / safe, 0.0)
        return (x.data * coef[..., None],)

    return record(n, (x,), back, "norm_last")


REGISTERED_OPS = (
    "add", "sub", "mul", "scale", "matmul", "linear", "relu", "sigmoid", "clamp_min", "log",
    "concat", "mean_over_rows", "repeat_rows", "sum", "mean", "reshape", "gather_rows",
    "gather_pixels", "crop2d", "conv2d", "upsample_nearest", "normalize_quaternion",
    "quat_to_rotmat", "rigid_transform", "norm_last",
)
