"""scikit-learn style front end: ``DenseFusion().fit(scenes, models=...).predict(scenes)``."""
from __future__ import annotations

from collections.abc import Mapping

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import load_checkpoint, save_checkpoint
from .data import Scene
from .exceptions import NoValidDepth
from .loss import LossConfig
from .metrics import auc, evaluate
from .network import NetworkConfig, estimate
from .refine import RefinerConfig, refine
from .training import TrainConfig, TrainingState, train


def check_scenes(X):
    """Validate a non-empty sequence of Scene objects and return it as a list."""
    if isinstance(X, Scene):
        X = [X]
    try:
        scenes = list(X)
    except TypeError:
        raise TypeError(f"expected a sequence of Scene objects, got {type(X).__name__}") from None
    if not scenes:
        raise ValueError("need at least one scene")
    bad = [type(s).__name__ for s in scenes if not isinstance(s, Scene)]
    if bad:
        raise TypeError(f"expected Scene objects, got {bad[0]}")
    return scenes


def check_models(models, scenes):
    """Object models as an id -> model dict covering every object in ``scenes``."""
    if models is None:
        raise ValueError("fit needs the object models (models=...)")
    table = dict(models) if isinstance(models, Mapping) else {m.id: m for m in models}
    missing = sorted({oid for s in scenes for oid in s.object_ids} - set(table))
    if missing:
        raise ValueError(f"no model for object ids {missing}")
    return table


class DenseFusion(BaseEstimator):
    """6D pose estimator for RGB-D scenes with known object models.

    ``mode`` picks the architecture: ``per_pixel`` (dense predictions voted by
    confidence, optionally refined), ``single`` (one pose from the fused
    global feature) or ``global`` (no per-pixel fusion).
    """

    def __init__(self, mode="per_pixel", n_points=500, d_rgb=128, d_geo=128, d_glob=256,
                 encoder_channels=(16, 32), geo_hidden=(64, 128), fuse_hidden=256,
                 head_hidden=(128, 64), point_scale=10.0, w=0.01, n_model_points=200,
                 epochs=15, lr=2e-3, batch_size=1, refine_iterations=2,
                 refiner_hidden=(256, 128, 64), refiner_start_epoch=10, refiner_lr=1e-3,
                 random_state=0):
        self.mode = mode
        self.n_points = n_points
        self.d_rgb = d_rgb
        self.d_geo = d_geo
        self.d_glob = d_glob
        self.encoder_channels = encoder_channels
        self.geo_hidden = geo_hidden
        self.fuse_hidden = fuse_hidden
        self.head_hidden = head_hidden
        self.point_scale = point_scale
        self.w = w
        self.n_model_points = n_model_points
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.refine_iterations = refine_iterations
        self.refiner_hidden = refiner_hidden
        self.refiner_start_epoch = refiner_start_epoch
        self.refiner_lr = refiner_lr
        self.random_state = random_state

    def _configs(self):
        net = NetworkConfig(d_rgb=self.d_rgb, d_geo=self.d_geo, d_glob=self.d_glob,
                            n_points=self.n_points, encoder_channels=self.encoder_channels,
                            geo_hidden=self.geo_hidden, fuse_hidden=self.fuse_hidden,
                            head_hidden=self.head_hidden, mode=self.mode,
                            point_scale=self.point_scale, seed=self.random_state)
        ref = RefinerConfig(K=self.refine_iterations, hidden=self.refiner_hidden, d_geo=self.d_geo,
                            geo_hidden=self.geo_hidden, fuse_hidden=self.fuse_hidden,
                            d_glob=self.d_glob, start_epoch=self.refiner_start_epoch,
                            seed=self.random_state + 1)
        loss = LossConfig(w=self.w, n_model_points=self.n_model_points)
        tr = TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                         refiner_lr=self.refiner_lr, seed=self.random_state)
        return net, ref, loss, tr

    def fit(self, X, y=None, models=None, X_val=None):
        """Train on scenes ``X``; ground-truth poses come from the scenes, so ``y`` is unused."""
        scenes = check_scenes(X)
        val = check_scenes(X_val) if X_val is not None else []
        self.models_ = check_models(models, scenes + val)
        net, ref, loss, tr = self._configs()
        state = train(scenes, val, self.models_, net, loss, tr, ref)
        self._set_state(state, net, ref)
        return self

    def _set_state(self, state: TrainingState, net, ref):
        self.network_config_ = net
        self.refiner_config_ = ref
        self.params_ = state.params
        self.refiner_params_ = state.ref_params
        self.history_ = state.history

    def predict(self, X, refine_pose=True):
        """Estimated Pose per object per scene (None where the mask has no valid depth)."""
        check_is_fitted(self, "params_")
        out = []
        rng = np.random.default_rng(self.random_state)
        for scene in check_scenes(X):
            poses = []
            for i, oid in enumerate(scene.object_ids):
                try:
                    pose, _, cmap, inputs = estimate(scene, oid, scene.masks[i], self.params_,
                                                     self.network_config_, rng)
                except NoValidDepth:
                    poses.append(None)
                    continue
                if refine_pose and self.refiner_params_ is not None and self.refiner_config_.K > 0:
                    pose, _ = refine(pose, self.refiner_params_, inputs.cloud.points, cmap.data,
                                     inputs.cloud.pixel_index, self.refiner_config_.K)
                poses.append(pose)
            out.append(poses)
        return out

    def score(self, X, y=None, models=None):
        """ADD-S AUC (0..1, higher is better) over every object instance in ``X``."""
        check_is_fitted(self, "params_")
        scenes = check_scenes(X)
        table = check_models(models, scenes) if models is not None else self.models_
        preds = self.predict(scenes)
        lookup = {(s, i): p for s, ps in enumerate(preds) for i, p in enumerate(ps)}
        ids = {id(s): k for k, s in enumerate(scenes)}
        result = evaluate(scenes, table, lambda scene, i, mask, timer: lookup[(ids[id(scene)], i)])
        return auc([r.adds for r in result.records])

    def save(self, path):
        check_is_fitted(self, "params_")
        sections = {"network": self.params_}
        if self.refiner_params_ is not None:
            sections["refiner"] = self.refiner_params_
        save_checkpoint(path, sections, {"estimator": self.get_params(),
                                         "models": [m.to_dict() for m in self.models_.values()],
                                         "history": self.history_})

    @classmethod
    def load(cls, path):
        from .data import ObjectModel
        sections, meta = load_checkpoint(path)
        est = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["estimator"].items()})
        net, ref, _, _ = est._configs()
        est.models_ = {m.id: m for m in (ObjectModel.from_dict(d) for d in meta["models"])}
        state = TrainingState(sections["network"], ref_params=sections.get("refiner"),
                              history=meta.get("history", []))
        est._set_state(state, net, ref)
        return est
