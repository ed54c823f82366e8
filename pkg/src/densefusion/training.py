"""Epoch loop for the pose network and the gated refiner."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import AdamState
from .data import corrupt_mask
from .loss import LossConfig, object_loss, training_step
from .network import NetworkConfig, estimate, init_params
from .refine import (RefinerConfig, init_refiner_params, make_initial, refiner_gate,
                     refiner_training_step)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 15
    lr: float = 2e-3
    lr_final: float = 0.0            # cosine decay from lr to lr_final
    batch_size: int = 1
    refiner_lr: float = 1e-3
    refiner_batch: int = 4
    mask_dilation: int = 0           # optional segmentation-noise augmentation
    mask_leak: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.refiner_batch < 1:
            raise ValueError("epochs must be >= 0 and batch sizes >= 1")
        if self.lr < 0 or self.refiner_lr < 0:
            raise ValueError("learning rates must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainingState:
    """Everything needed to continue training exactly where it stopped."""
    params: dict
    adam: AdamState = field(default_factory=AdamState)
    ref_params: dict = None
    ref_adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0                      # epochs completed
    refiner_start: int = -1             # epoch the gate opened, -1 while closed
    history: list = field(default_factory=list)

    @property
    def val_losses(self):
        return [row["val_loss"] for row in self.history]


def new_state(net_config: NetworkConfig, ref_config: RefinerConfig = None) -> TrainingState:
    ref = init_refiner_params(ref_config, net_config.d_rgb) \
        if ref_config is not None and net_config.mode == "per_pixel" else None
    return TrainingState(init_params(net_config), ref_params=ref)


def learning_rate(epoch, config: TrainConfig):
    if config.epochs <= 1:
        return config.lr
    a = epoch / config.epochs
    return config.lr_final + 0.5 * (config.lr - config.lr_final) * (1 + np.cos(np.pi * a))


def _usable(scene, i, mask=None):
    mask = scene.masks[i] if mask is None else mask
    return bool(np.any(np.asarray(mask).astype(bool) & (scene.depth > 0)))


def validation_loss(scenes, params, net_config, loss_config, models, seed=0):
    """Mean training objective over every usable object in ``scenes`` (fixed sampling)."""
    rng = np.random.default_rng(seed)
    vals = []
    for scene in scenes:
        for i, oid in enumerate(scene.object_ids):
            if _usable(scene, i):
                loss, _ = object_loss(params, net_config, loss_config, scene, i, models[oid], rng)
                vals.append(float(loss.data))
    return float(np.mean(vals)) if vals else float("nan")


def _refiner_instances(scenes, params, net_config, models, rng, progress, ref_config, n_model_points):
    out = []
    for scene in scenes:
        for i, oid in enumerate(scene.object_ids):
            if not _usable(scene, i):
                continue
            model = models[oid]
            pose, _, cmap, inputs = estimate(scene, oid, scene.masks[i], params, net_config, rng)
            m = min(n_model_points, model.n_points)
            pts = model.surface_points[np.sort(rng.choice(model.n_points, size=m, replace=False))]
            gt = scene.gt_poses[i]
            out.append(dict(points=inputs.cloud.points, color_map=cmap.data,
                            pixel_index=inputs.cloud.pixel_index,
                            initial=make_initial(gt, pose, rng, progress, ref_config),
                            gt=gt, model_points=pts, symmetric=bool(model.symmetric)))
    return out


def train(train_scenes, val_scenes, models, net_config: NetworkConfig, loss_config: LossConfig,
          train_config: TrainConfig, ref_config: RefinerConfig = None, state: TrainingState = None,
          on_epoch=None) -> TrainingState:
    """Train (or resume) for ``train_config.epochs`` epochs; returns the final state.

    ``models`` maps object id to ObjectModel. Each epoch draws its randomness
    from ``(seed, epoch)``, so a resumed run reproduces an uninterrupted one.
    The refiner (per-pixel networks with a RefinerConfig only) trains on the
    frozen current network's outputs from the epoch after its gate opens.
    ``on_epoch(row, state)`` is called after every epoch.
    """
    if not train_scenes:
        raise ValueError("no training scenes")
    state = state or new_state(net_config, ref_config)
    use_refiner = state.ref_params is not None and ref_config is not None and ref_config.K > 0
    for epoch in range(state.epoch, train_config.epochs):
        rng = np.random.default_rng([train_config.seed, epoch])
        lr = learning_rate(epoch, train_config)
        mask_fn = None
        if train_config.mask_dilation or train_config.mask_leak:
            def mask_fn(scene, i):
                return corrupt_mask(scene.masks[i], train_config.mask_dilation, train_config.mask_leak,
                                    seed=int(rng.integers(2 ** 31)))
        order = rng.permutation(len(train_scenes))
        losses = []
        for s in range(0, len(order), train_config.batch_size):
            batch = [train_scenes[j] for j in order[s:s + train_config.batch_size]]
            _, loss = training_step(batch, state.params, state.adam, net_config, loss_config, models,
                                    lr, rng, mask_fn=mask_fn)
            if np.isfinite(loss):
                losses.append(loss)
        ref_losses = []
        if use_refiner and state.refiner_start >= 0:
            span = max(train_config.epochs - state.refiner_start, 1)
            progress = (epoch - state.refiner_start) / span
            ref_lr = train_config.refiner_lr * learning_rate(epoch - state.refiner_start,
                                                             TrainConfig(epochs=span, lr=1.0))
            for s in range(0, len(order), train_config.refiner_batch):
                batch = [train_scenes[j] for j in order[s:s + train_config.refiner_batch]]
                insts = _refiner_instances(batch, state.params, net_config, models, rng, progress,
                                           ref_config, loss_config.n_model_points)
                if insts:
                    ref_losses.append(refiner_training_step(insts, state.ref_params, state.ref_adam,
                                                            ref_config, ref_lr) / len(insts))
        val = validation_loss(val_scenes, state.params, net_config, loss_config, models,
                              seed=train_config.seed) if val_scenes else float("nan")
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "val_loss": val,
               "refiner_loss": float(np.mean(ref_losses)) if ref_losses else float("nan")}
        state.history.append(row)
        state.epoch = epoch + 1
        if use_refiner and state.refiner_start < 0 and refiner_gate(epoch + 1, state.val_losses, ref_config):
            state.refiner_start = epoch + 1
            log.info("refiner training enabled from epoch %d", epoch + 2)
        log.info("epoch %d train %.5f val %.5f refiner %.5f", row["epoch"], row["train_loss"],
                 row["val_loss"], row["refiner_loss"])
        if on_epoch is not None:
            on_epoch(row, state)
    return state


def state_sections(state: TrainingState) -> dict:
    """Checkpoint sections for ``state`` (network, refiner and optimizer moments)."""
    sections = {"network": state.params}
    sections["adam.m"] = dict(state.adam.m)
    sections["adam.v"] = dict(state.adam.v)
    if state.ref_params is not None:
        sections["refiner"] = state.ref_params
        sections["refiner_adam.m"] = dict(state.ref_adam.m)
        sections["refiner_adam.v"] = dict(state.ref_adam.v)
    return sections


def state_meta(state: TrainingState) -> dict:
    return {"epoch": state.epoch, "refiner_start": state.refiner_start, "history": state.history,
            "adam_step": state.adam.step, "refiner_adam_step": state.ref_adam.step}


def state_from_checkpoint(sections, meta) -> TrainingState:
    def plain(d):
        return {k: v.data for k, v in d.items()}
    state = TrainingState(sections["network"])
    state.adam = AdamState(meta.get("adam_step", 0), plain(sections.get("adam.m", {})),
                           plain(sections.get("adam.v", {})))
    if "refiner" in sections:
        state.ref_params = sections["refiner"]
        state.ref_adam = AdamState(meta.get("refiner_adam_step", 0),
                                   plain(sections.get("refiner_adam.m", {})),
                                   plain(sections.get("refiner_adam.v", {})))
    state.epoch = meta.get("epoch", 0)
    state.refiner_start = meta.get("refiner_start", -1)
    state.history = list(meta.get("history", []))
    return state
