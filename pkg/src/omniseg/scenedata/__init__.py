from .augment import Transform3D, augment_2d, augment_3d, draw_transform_3d, sample_training_frames
from .generate import SceneConfig, generate_scene, look_at, render_frame, simulate_depth_holes
from .io import InvariantViolation, load_scene, save_scene
from .types import BACKGROUND_CLASS, DEFAULT_VOCABULARY, Frame, Scene, SceneObject, VocabEntry, Vocabulary

__all__ = [
    "BACKGROUND_CLASS",
    "DEFAULT_VOCABULARY",
    "Frame",
    "InvariantViolation",
    "Scene",
    "SceneConfig",
    "SceneObject",
    "Transform3D",
    "VocabEntry",
    "Vocabulary",
    "augment_2d",
    "augment_3d",
    "draw_transform_3d",
    "generate_scene",
    "load_scene",
    "look_at",
    "render_frame",
    "sample_training_frames",
    "save_scene",
    "simulate_depth_holes",
]
