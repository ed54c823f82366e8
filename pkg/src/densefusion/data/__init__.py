"""Object models, synthetic scenes and scene files."""
from .generate import SceneSpec, generate_scene, random_scene_poses
from .models import SHAPE_KINDS, ObjectModel, make_model
from .scene import Scene, corrupt_mask, render_scene
from .scene_io import (load_models, load_scene, read_manifest, save_models, save_scene,
                       write_manifest)

__all__ = [
    "ObjectModel", "make_model", "SHAPE_KINDS", "Scene", "render_scene", "corrupt_mask",
    "save_scene", "load_scene", "read_manifest", "write_manifest", "save_models", "load_models",
    "SceneSpec", "generate_scene", "random_scene_poses",
]
