from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics, CameraPose


@dataclass(frozen=True)
class VocabEntry:
    class_id: int
    name: str
    shape: str = "none"  # cuboid | sphere | none (room shell)
    albedo: tuple = (0.7, 0.7, 0.7)


@dataclass(frozen=True)
class Vocabulary:
    entries: tuple

    def __post_init__(self):
        ids = [e.class_id for e in self.entries]
        if ids != list(range(len(ids))):
            raise ValueError(f"class ids must be dense from 0, got {ids}")
        for e in self.entries:
            words = e.name.split()
            if not 1 <= len(words) <= 3:
                raise ValueError(f"class name must be 1..3 words: {e.name!r}")

    def __len__(self):
        return len(self.entries)

    @property
    def names(self):
        return [e.name for e in self.entries]

    def object_classes(self):
        return [e.class_id for e in self.entries if e.class_id != BACKGROUND_CLASS]

    def truncated(self, n_object_classes: int) -> "Vocabulary":
        """The background entry plus the first ``n_object_classes`` object classes."""
        return Vocabulary(self.entries[: 1 + n_object_classes])


BACKGROUND_CLASS = 0

DEFAULT_VOCABULARY = Vocabulary(
    (
        VocabEntry(0, "room shell", "none", (0.72, 0.70, 0.66)),
        VocabEntry(1, "box", "cuboid", (0.85, 0.22, 0.15)),
        VocabEntry(2, "ball", "sphere", (0.20, 0.72, 0.25)),
        VocabEntry(3, "tall cabinet", "cuboid", (0.18, 0.30, 0.85)),
        VocabEntry(4, "beach ball", "sphere", (0.92, 0.80, 0.12)),
        VocabEntry(5, "low table", "cuboid", (0.60, 0.25, 0.70)),
        VocabEntry(6, "shower curtain", "cuboid", (0.15, 0.75, 0.80)),
    )
)


@dataclass
class SceneObject:
    shape: str
    center: np.ndarray
    size: np.ndarray  # full extents (cuboid) or (r, r, r) (sphere)
    albedo: np.ndarray
    class_id: int
    instance_id: int
    yaw: float = 0.0

    @property
    def radius(self):
        return float(self.size[0])

    def footprint_radius(self):
        if self.shape == "sphere":
            return self.radius
        return 0.5 * float(np.hypot(self.size[0], self.size[2]))


@dataclass
class Frame:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    rgb: np.ndarray  # H x W x 3 in [0, 1]
    depth: np.ndarray  # H x W, metres, 0 = missing
    gt_instance: np.ndarray  # H x W int, 0 = background

    def replace(self, **kw) -> "Frame":
        d = dict(intrinsics=self.intrinsics, pose=self.pose, rgb=self.rgb, depth=self.depth, gt_instance=self.gt_instance)
        d.update(kw)
        return Frame(**d)


@dataclass
class Scene:
    frames: list
    objects: list
    gt_surface_cloud: np.ndarray  # P x 5: x y z instance_id class_id
    vocabulary: Vocabulary = field(default=DEFAULT_VOCABULARY)

    @property
    def num_views(self):
        return len(self.frames)

    def instance_classes(self) -> dict:
        return {o.instance_id: o.class_id for o in self.objects}

    def visible_views(self) -> dict:
        """instance id -> sorted list of view indices where it covers at least one pixel."""
        out = {o.instance_id: [] for o in self.objects}
        for v, f in enumerate(self.frames):
            for iid in np.unique(f.gt_instance):
                if iid in out:
                    out[int(iid)].append(v)
        return out

    def subset(self, views) -> "Scene":
        return Scene([self.frames[v] for v in views], self.objects, self.gt_surface_cloud, self.vocabulary)
