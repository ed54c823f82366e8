"""Command implementations behind the ``densefusion`` CLI.

Every command reads one JSON config, writes its outputs to a fresh
timestamped directory under ``paths.runs`` together with the resolved
config, and returns that directory.
"""
from __future__ import annotations

import copy
import datetime
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .data import (SceneSpec, corrupt_mask, generate_scene, load_models, load_scene, make_model,
                   read_manifest, save_models, save_scene, write_manifest)
from .exceptions import IoError
from .geometry import CameraIntrinsics
from .icp import IcpConfig
from .loss import LossConfig
from .metrics import evaluate
from .network import NetworkConfig
from .pipeline import VARIANTS, benchmark, check_variant, make_estimator, oracle_estimator
from .refine import RefinerConfig
from .reports import (format_bench, format_table, timing_summary, write_distances_csv, write_json,
                      write_loss_csv, write_occlusion_csv, write_overlays)
from .training import (TrainConfig, new_state, state_from_checkpoint, state_meta, state_sections,
                       train)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

DEFAULTS = {
    "seed": 0,
    "paths": {"dataset": "dataset", "runs": "runs"},
    "data": {
        "objects": [
            {"kind": "box", "dims": [0.10, 0.07, 0.05], "seed": 1},
            {"kind": "lshape", "dims": [0.12, 0.09, 0.05], "seed": 2},
            {"kind": "cylinder", "dims": [0.035, 0.12], "seed": 3},
        ],
        "n_points": 500,
        "n_train": 500, "n_val": 20, "n_test": 100,
        "scene": {},
        "intrinsics": {},
        "occlusion_sweep": None,
    },
    "network": {},
    "loss": {},
    "refiner": {},
    "icp": {},
    "train": {},
    "eval": {"variant": "per-pixel", "oracle": False, "mask_dilation": 0, "mask_leak": 0.0,
             "threshold": 0.02, "overlays": 10},
    "bench": {"frames": 50},
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise IoError("config file not found", path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)

    @classmethod
    def from_dict(cls, d, base_dir=None):
        cfg = cls(_merge(DEFAULTS, d), Path(base_dir) if base_dir is not None else Path.cwd())
        cfg.network, cfg.loss, cfg.refiner, cfg.icp, cfg.train  # validate eagerly
        return cfg

    def with_seed(self, seed):
        if seed is None:
            return self
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        return RunConfig(raw, self.base_dir)

    def path(self, key) -> Path:
        p = Path(self.raw["paths"][key])
        return p if p.is_absolute() else self.base_dir / p

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def network(self):
        return NetworkConfig.from_dict({"seed": self.seed, **self.raw["network"]})

    @property
    def loss(self):
        return LossConfig.from_dict(self.raw["loss"])

    @property
    def refiner(self):
        return RefinerConfig.from_dict({"seed": self.seed + 1, **self.raw["refiner"]})

    @property
    def icp(self):
        return IcpConfig.from_dict(self.raw["icp"])

    @property
    def train(self):
        return TrainConfig.from_dict({"seed": self.seed, **self.raw["train"]})

    @property
    def scene_spec(self):
        return SceneSpec.from_dict(self.raw["data"]["scene"])

    @property
    def intrinsics(self):
        return CameraIntrinsics.from_dict({**CameraIntrinsics().to_dict(), **self.raw["data"]["intrinsics"]})

    def resolved(self):
        out = copy.deepcopy(self.raw)
        out["paths"] = {k: str(self.path(k)) for k in out["paths"]}
        out["network"] = self.network.to_dict()
        out["loss"] = self.loss.to_dict()
        out["refiner"] = self.refiner.to_dict()
        out["icp"] = self.icp.to_dict()
        out["train"] = self.train.to_dict()
        out["data"]["scene"] = self.scene_spec.to_dict()
        out["data"]["intrinsics"] = self.intrinsics.to_dict()
        return out


def run_directory(config: RunConfig, command):
    """Fresh ``<runs>/<command>-<timestamp>`` directory holding the resolved config."""
    root = config.path("runs")
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    run = root / f"{command}-{stamp}"
    n = 1
    while run.exists():
        run = root / f"{command}-{stamp}-{n}"
        n += 1
    run.mkdir(parents=True)
    write_json(config.resolved(), run / "config.json")
    return run


def build_models(config: RunConfig):
    data = config.raw["data"]
    return [make_model(o["kind"], o["dims"], seed=o.get("seed", i), model_id=i,
                       n_points=o.get("n_points", data["n_points"]))
            for i, o in enumerate(data["objects"])]


def cmd_generate(config: RunConfig) -> Path:
    """Write train/val/test scene splits, one manifest each, plus models.json."""
    models = build_models(config)      # shape errors surface before anything is written
    data = config.raw["data"]
    spec, intr = config.scene_spec, config.intrinsics
    sweep = data.get("occlusion_sweep")
    root = config.path("dataset")
    root.mkdir(parents=True, exist_ok=True)
    save_models(models, root / "models.json")
    counts = {}
    for split_id, split in enumerate(SPLITS):
        n = int(data[f"n_{split}"])
        (root / split).mkdir(exist_ok=True)
        names = []
        for i in range(n):
            occ = float(sweep[i % len(sweep)]) if sweep and split == "test" else None
            scene = generate_scene(models, [config.seed, split_id, i], spec, intr, occluder_fraction=occ)
            name = f"scene_{i:05d}.dfsc"
            save_scene(scene, root / split / name)
            names.append(name)
        write_manifest(root / split, names)
        counts[split] = n
    run = run_directory(config, "generate")
    write_json({"dataset": str(root), "scenes": counts}, run / "summary.json")
    log.info("wrote %s scenes to %s", counts, root)
    return run


def load_split(config: RunConfig, split):
    root = config.path("dataset")
    if not (root / split / "manifest.txt").is_file():
        raise IoError("dataset split not found", root / split)
    return [load_scene(p) for p in read_manifest(root / split)]


def load_dataset_models(config: RunConfig):
    path = config.path("dataset") / "models.json"
    if not path.is_file():
        raise IoError("models file not found", path)
    return {m.id: m for m in load_models(path)}


def save_state(path, state, config: RunConfig):
    meta = {"run_config": config.resolved(), "network": config.network.to_dict(),
            "refiner": config.refiner.to_dict(), "training": state_meta(state)}
    save_checkpoint(path, state_sections(state), meta)


def load_trained(path):
    """``(state, network config, refiner config, checkpoint metadata)`` from a checkpoint."""
    sections, meta = load_checkpoint(path)
    meta = meta or {}
    state = state_from_checkpoint(sections, meta.get("training", {}))
    net = NetworkConfig.from_dict(meta.get("network", {}))
    ref = RefinerConfig.from_dict(meta.get("refiner", {}))
    return state, net, ref, meta


def cmd_train(config: RunConfig, checkpoint=None) -> Path:
    """Train the network (and gated refiner); writes checkpoint.dfckpt and loss.csv.

    With ``checkpoint`` training resumes from that state up to ``train.epochs``.
    """
    train_scenes = load_split(config, "train")
    val_scenes = load_split(config, "val")
    models = load_dataset_models(config)
    net, ref = config.network, config.refiner
    if checkpoint is not None:
        state, net, ref, _ = load_trained(checkpoint)
    else:
        state = new_state(net, ref)
    run = run_directory(config, "train")
    ckpt = run / "checkpoint.dfckpt"

    def on_epoch(row, st):
        save_state(ckpt, st, config)
        write_loss_csv(st.history, run / "loss.csv")

    state = train(train_scenes, val_scenes, models, net, config.loss, config.train, ref, state,
                  on_epoch=on_epoch)
    save_state(ckpt, state, config)
    write_loss_csv(state.history, run / "loss.csv")
    return run


def _mask_fn(config: RunConfig):
    ev = config.raw["eval"]
    dil, leak = int(ev.get("mask_dilation", 0)), float(ev.get("mask_leak", 0.0))
    if not dil and not leak:
        return None

    def fn(scene, i):
        return corrupt_mask(scene.masks[i], dil, leak, seed=config.seed + i)
    return fn


def cmd_eval(config: RunConfig, checkpoint=None, variant=None) -> Path:
    """Evaluate a variant on the test split and write the reports."""
    ev = config.raw["eval"]
    variant = variant or ev["variant"]
    check_variant(variant)
    scenes = load_split(config, "test")
    models = load_dataset_models(config)
    if ev.get("oracle"):
        estimator, label = oracle_estimator, "oracle"
    else:
        if checkpoint is None:
            raise IoError("eval needs --checkpoint unless eval.oracle is set")
        state, net, ref, _ = load_trained(checkpoint)
        estimator = make_estimator(variant, state.params, net, models, state.ref_params, ref,
                                   config.icp, seed=config.seed)
        label = variant
    result = evaluate(scenes, models, estimator, mask_fn=_mask_fn(config),
                      threshold=float(ev.get("threshold", 0.02)))
    run = run_directory(config, f"eval-{label}")
    (run / "report.txt").write_text(format_table(result.table, f"variant: {label}"))
    write_json({"variant": label, "table": {str(k): v for k, v in result.table.items()},
                "occlusion_curve": [{"bucket_lower_pct": lo, "accuracy_pct": acc, "count": n}
                                    for lo, acc, n in result.curve],
                "instances": len(result.records)}, run / "report.json")
    write_json(timing_summary(result.records), run / "timings.json")
    write_distances_csv(result.records, run / "distances.csv")
    write_occlusion_csv(result.curve, run / "occlusion.csv")
    n_overlay = ev.get("overlays", 10)
    if n_overlay:
        write_overlays(scenes, models, result.records, run / "overlays", label, limit=int(n_overlay))
    return run


def cmd_bench(config: RunConfig, checkpoint=None) -> Path:
    """Per-frame stage timings of neural refinement against ICP."""
    if checkpoint is None:
        raise IoError("bench needs --checkpoint")
    scenes = load_split(config, "test")
    models = load_dataset_models(config)
    state, net, ref, _ = load_trained(checkpoint)
    stats = benchmark(scenes, state.params, net, state.ref_params, ref, models, config.icp,
                      frames=int(config.raw["bench"]["frames"]), seed=config.seed)
    run = run_directory(config, "bench")
    (run / "bench.txt").write_text(format_bench(stats))
    write_json({k: {"mean": float(v.mean()), "std": float(v.std()), "per_frame": v}
                for k, v in stats.items()}, run / "bench.json")
    return run


__all__ = ["RunConfig", "cmd_generate", "cmd_train", "cmd_eval", "cmd_bench", "VARIANTS",
           "load_trained", "load_split", "load_dataset_models", "build_models"]
