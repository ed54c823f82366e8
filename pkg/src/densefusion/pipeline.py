"""Pose-estimation variants as evaluation callables, and the per-frame runtime benchmark."""
from __future__ import annotations

import time

import numpy as np

from .exceptions import DegenerateConfiguration, DenseFusionError
from .icp import IcpConfig, icp_refine
from .network import NetworkConfig, estimate
from .refine import refine

VARIANTS = ("single", "per-pixel", "iterative", "icp", "global")
# network mode each variant needs its checkpoint to have been trained with
REQUIRED_MODE = {"single": "single", "per-pixel": "per_pixel", "iterative": "per_pixel",
                 "icp": "per_pixel", "global": "global"}


class UnknownVariant(DenseFusionError, ValueError):
    def __init__(self, name):
        super().__init__(f"unknown variant {name!r}; valid variants: {', '.join(VARIANTS)}")


class VariantMismatch(DenseFusionError, ValueError):
    pass


def check_variant(variant, net_config: NetworkConfig = None):
    if variant not in VARIANTS:
        raise UnknownVariant(variant)
    if net_config is not None and net_config.mode != REQUIRED_MODE[variant]:
        raise VariantMismatch(f"variant {variant!r} needs a network trained in mode "
                              f"{REQUIRED_MODE[variant]!r}, checkpoint has {net_config.mode!r}")


def oracle_estimator(scene, index, mask, timer):
    """Returns the ground-truth pose; checks the evaluation plumbing end to end."""
    with timer.stage("pe"):
        return scene.gt_poses[index]


def make_estimator(variant, params, net_config: NetworkConfig, models=None, ref_params=None,
                   ref_config=None, icp_config: IcpConfig = None, seed=0):
    """Callable ``(scene, index, mask, timer) -> Pose`` implementing ``variant``.

    Point sampling draws from one generator seeded with ``seed``, so a fixed
    evaluation order gives identical results run to run.
    """
    check_variant(variant, net_config)
    if variant == "iterative" and ref_params is None:
        raise ValueError("the iterative variant needs refiner parameters")
    if variant == "icp" and models is None:
        raise ValueError("the icp variant needs the object models")
    icp_config = icp_config or IcpConfig()
    K = ref_config.K if ref_config is not None else 2
    rng = np.random.default_rng(seed)

    def run(scene, index, mask, timer):
        oid = scene.object_ids[index]
        with timer.stage("pe"):
            pose, _, cmap, inputs = estimate(scene, oid, mask, params, net_config, rng)
        if variant == "iterative":
            with timer.stage("refine"):
                pose, _ = refine(pose, ref_params, inputs.cloud.points, cmap.data,
                                 inputs.cloud.pixel_index, K)
        elif variant == "icp":
            with timer.stage("refine"):
                try:
                    pose = icp_refine(inputs.cloud, models[oid], pose, icp_config)[0]
                except DegenerateConfiguration:
                    pass                      # too few correspondences: keep the network pose
        return pose

    return run


def benchmark(scenes, params, net_config, ref_params, ref_config, models, icp_config=None,
              frames=50, seed=0):
    """Per-frame seconds for each stage over the first ``frames`` scenes.

    Stages: ``seg`` (ground-truth mask lookup), ``pe`` (pose network),
    ``refine`` (neural refinement, K iterations) and ``icp`` (icp_refine from
    the same network pose, for comparison). ``all`` = seg + pe + refine.
    Returns ``{stage: array of per-frame seconds}``.
    """
    check_variant("iterative", net_config)
    icp_config = icp_config or IcpConfig()
    rng = np.random.default_rng(seed)
    if not scenes:
        raise ValueError("benchmark needs at least one scene")
    out = {k: [] for k in ("seg", "pe", "refine", "icp", "all")}
    for f in range(frames):
        scene = scenes[f % len(scenes)]
        t = dict.fromkeys(("seg", "pe", "refine", "icp"), 0.0)
        for i, oid in enumerate(scene.object_ids):
            t0 = time.perf_counter()
            mask = scene.masks[i].astype(bool)
            usable = bool(np.any(mask & (scene.depth > 0)))
            t["seg"] += time.perf_counter() - t0
            if not usable:
                continue
            t0 = time.perf_counter()
            pose, _, cmap, inputs = estimate(scene, oid, mask, params, net_config, rng)
            t["pe"] += time.perf_counter() - t0
            t0 = time.perf_counter()
            refine(pose, ref_params, inputs.cloud.points, cmap.data, inputs.cloud.pixel_index, ref_config.K)
            t["refine"] += time.perf_counter() - t0
            t0 = time.perf_counter()
            try:
                icp_refine(inputs.cloud, models[oid], pose, icp_config)
            except DegenerateConfiguration:
                pass
            t["icp"] += time.perf_counter() - t0
        for k, v in t.items():
            out[k].append(v)
        out["all"].append(t["seg"] + t["pe"] + t["refine"])
    return {k: np.array(v) for k, v in out.items()}
