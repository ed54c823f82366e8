"""Binary scene files and dataset manifests.

Scene file layout (all little-endian)::

    b"DFSC" | u16 version | u32 metadata length | metadata JSON (utf-8) | arrays

The metadata lists the arrays (name, dtype, shape) in the order their raw
bytes follow.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..exceptions import MalformedFile
from ..geometry import CameraIntrinsics, Pose
from .models import ObjectModel
from .scene import Scene

MAGIC = b"DFSC"
VERSION = 1
_DTYPES = {"rgb": "<f8", "depth": "<f8", "masks": "|u1"}


def _scene_metadata(scene: Scene) -> dict:
    arrays = [
        {"name": "rgb", "dtype": _DTYPES["rgb"], "shape": list(scene.rgb.shape)},
        {"name": "depth", "dtype": _DTYPES["depth"], "shape": list(scene.depth.shape)},
        {"name": "masks", "dtype": _DTYPES["masks"], "shape": list(scene.masks.shape)},
    ]
    return {
        "intrinsics": scene.intrinsics.to_dict(),
        "object_ids": [int(i) for i in scene.object_ids],
        "symmetric": [bool(s) for s in scene.symmetric],
        "poses": [[float(v) for v in p.to_array()] for p in scene.gt_poses],
        "arrays": arrays,
        "meta": scene.meta,
    }


def save_scene(scene: Scene, path):
    meta = json.dumps(_scene_metadata(scene), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(meta)))
        fh.write(meta)
        fh.write(np.ascontiguousarray(scene.rgb, dtype=_DTYPES["rgb"]).tobytes())
        fh.write(np.ascontiguousarray(scene.depth, dtype=_DTYPES["depth"]).tobytes())
        fh.write(np.ascontiguousarray(scene.masks, dtype=_DTYPES["masks"]).tobytes())


def load_scene(path) -> Scene:
    raw = Path(path).read_bytes()
    if len(raw) < 10:
        raise MalformedFile("file shorter than the fixed header", len(raw))
    if raw[:4] != MAGIC:
        raise MalformedFile("bad magic bytes", 0)
    version, meta_len = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise MalformedFile(f"unsupported version {version}", 4)
    pos = 10
    if pos + meta_len > len(raw):
        raise MalformedFile("truncated metadata block", len(raw))
    try:
        meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"unreadable metadata: {exc}", pos) from None
    pos += meta_len
    try:
        intrinsics = CameraIntrinsics.from_dict(meta["intrinsics"])
        ids = [int(i) for i in meta.get("object_ids", [])]
        poses = [Pose.from_array(p) for p in meta.get("poses", [])]
        symmetric = [bool(s) for s in meta.get("symmetric", [False] * len(ids))]
        specs = meta.get("arrays", [])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(f"invalid metadata: {exc}", 10) from None
    if len(poses) != len(ids):
        raise MalformedFile("object_ids and poses differ in length", 10)

    arrays = {}
    for spec in specs:
        dtype = np.dtype(spec["dtype"])
        shape = tuple(int(d) for d in spec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(raw):
            raise MalformedFile(f"truncated array {spec['name']!r}", len(raw))
        arrays[spec["name"]] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize,
                                             offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(raw):
        raise MalformedFile("trailing bytes after last array", pos)

    H, W = intrinsics.height, intrinsics.width
    rgb = arrays.get("rgb", np.zeros((H, W, 3))).astype(np.float64)
    depth = arrays.get("depth", np.zeros((H, W))).astype(np.float64)
    masks = arrays.get("masks", np.zeros((len(ids), H, W), dtype=np.uint8)).astype(np.uint8)
    if rgb.shape != (H, W, 3) or depth.shape != (H, W) or masks.shape != (len(ids), H, W):
        raise MalformedFile("array shapes disagree with intrinsics/object count", 10)
    return Scene(rgb, depth, masks, ids, poses, intrinsics, symmetric, meta.get("meta", {}))


def write_manifest(directory, relative_paths, name="manifest.txt"):
    directory = Path(directory)
    (directory / name).write_text("".join(f"{p}\n" for p in relative_paths))


def read_manifest(directory, name="manifest.txt"):
    directory = Path(directory)
    lines = (directory / name).read_text().splitlines()
    return [directory / line.strip() for line in lines if line.strip()]


def save_models(models, path):
    Path(path).write_text(json.dumps([m.to_dict() for m in models], indent=2) + "\n")


def load_models(path):
    return [ObjectModel.from_dict(d) for d in json.loads(Path(path).read_text())]
