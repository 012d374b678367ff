"""Flat ``key=value`` run configuration."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .errors import ConfigError
from .learn.matching import LossWeights
from .learn.train import MODES, TrainConfig
from .model import ModelConfig
from .scenedata import SceneConfig


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _size(text):
    h, _, w = text.lower().partition("x")
    return int(h), int(w)


# key -> (parser, default, check, message)
def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


SCHEMA = {
    "image_size": (_size, (64, 64), lambda s: s[0] > 0 and s[1] > 0 and s[0] % 32 == 0 and s[1] % 32 == 0, "HxW, both multiples of 32"),
    "views": (int, 4, _pos, "positive"),
    "n_classes": (int, 4, lambda x: 1 <= x <= 6, "1..6 object classes"),
    "width": (int, 16, _pos, "positive"),
    "dim": (int, 64, lambda x: x > 0 and x % 4 == 0, "positive multiple of 4"),
    "heads": (int, 4, _pos, "positive"),
    "knn_k": (int, 8, _pos, "positive"),
    "voxel_v4": (float, 0.04, _pos, "positive"),
    "upsample_voxel": (float, 0.16, _pos, "positive"),
    "fusion_layers": (int, 2, _nonneg, ">= 0"),
    "rounds": (int, 3, _nonneg, ">= 0"),
    "queries": (int, 20, _pos, "positive"),
    "deform_points": (int, 4, _pos, "positive"),
    "open_vocab": (_bool, False, None, ""),
    "lambda_class": (float, 2.0, _nonneg, ">= 0"),
    "lambda_bce": (float, 5.0, _nonneg, ">= 0"),
    "lambda_dice": (float, 5.0, _nonneg, ">= 0"),
    "no_object_weight": (float, 0.1, _nonneg, ">= 0"),
    "lr": (float, 1e-3, _pos, "positive"),
    "iterations": (int, 2000, _nonneg, ">= 0"),
    "decay_at": (float, 0.8, lambda x: 0 <= x <= 1, "in [0, 1]"),
    "clip": (float, 1.0, _nonneg, ">= 0 (0 disables)"),
    "seed": (int, 0, _nonneg, ">= 0"),
    "mode": (str, "3d", lambda x: x in MODES, f"one of {MODES}"),
    "train_views": (int, 4, _pos, "positive"),
    "augment": (_bool, True, None, ""),
    "aug_scale_min": (float, 0.8, _pos, "positive"),
    "aug_scale_max": (float, 1.25, _pos, "positive"),
    "aug_jitter": (float, 0.1, _nonneg, ">= 0"),
    "aug_rotate": (_bool, True, None, ""),
    "eval_every": (int, 0, _nonneg, ">= 0"),
    "checkpoint_every": (int, 0, _nonneg, ">= 0"),
    "disable_3d_fusion": (_bool, False, None, ""),
    "late_fusion_only": (_bool, False, None, ""),
    "data": (str, "", None, ""),
    "out": (str, "", None, ""),
}
PATH_KEYS = ("data", "out")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return f"{value[0]}x{value[1]}"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v[1] for k, v in SCHEMA.items()})

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def parse(cls, text, source="<config>"):
        cfg = cls()
        seen = set()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, value = line.partition("=")
            key = key.strip()
            if not eq:
                raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
            if key not in SCHEMA:
                raise ConfigError(f"{source}:{n}: unknown key {key!r}")
            if key in seen:
                raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
            seen.add(key)
            cfg.set(key, value.strip(), f"{source}:{n}")
        return cfg.validate(source)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.parse(text, str(path))

    def set(self, key, text, where="<override>"):
        parser, _, check, msg = SCHEMA[key]
        try:
            value = parser(text)
        except ValueError as e:
            raise ConfigError(f"{where}: bad value for {key}: {e}") from e
        if check is not None and not check(value):
            raise ConfigError(f"{where}: {key}={text} out of range ({msg})")
        self.values[key] = value
        return self

    def validate(self, source="<config>"):
        v = self.values
        if v["aug_scale_min"] > v["aug_scale_max"]:
            raise ConfigError(f"{source}: aug_scale_min must not exceed aug_scale_max")
        if v["disable_3d_fusion"] and v["late_fusion_only"]:
            raise ConfigError(f"{source}: disable_3d_fusion and late_fusion_only are exclusive")
        if v["width"] % v["heads"] or v["dim"] % v["heads"]:
            raise ConfigError(f"{source}: width and dim must be divisible by heads")
        return self

    def to_text(self, include_paths=False):
        return "".join(f"{k}={_format(v)}\n" for k, v in self.values.items() if include_paths or k not in PATH_KEYS)

    def hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @property
    def fusion(self):
        if self.values["disable_3d_fusion"]:
            return "none"
        return "late" if self.values["late_fusion_only"] else "interleaved"

    def model_config(self, class_names) -> ModelConfig:
        v = self.values
        return ModelConfig(
            width=v["width"], dim=v["dim"], heads=v["heads"], knn_k=v["knn_k"], voxel_v4=v["voxel_v4"],
            fusion_layers=v["fusion_layers"], rounds=v["rounds"], queries=v["queries"], deform_points=v["deform_points"],
            upsample_voxel=v["upsample_voxel"], fusion=self.fusion, class_names=tuple(class_names), open_vocab=v["open_vocab"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            iterations=v["iterations"], lr=v["lr"], decay_at=v["decay_at"], clip=v["clip"], seed=v["seed"], mode=v["mode"],
            views=v["train_views"], augment=v["augment"], aug_scale_min=v["aug_scale_min"], aug_scale_max=v["aug_scale_max"],
            aug_jitter=v["aug_jitter"], aug_rotate=v["aug_rotate"],
            weights=LossWeights(v["lambda_class"], v["lambda_bce"], v["lambda_dice"], v["no_object_weight"]),
            eval_every=v["eval_every"], checkpoint_every=v["checkpoint_every"],
        )

    def scene_config(self) -> SceneConfig:
        h, w = self.values["image_size"]
        return SceneConfig(width=w, height=h, views=self.values["views"], n_classes=self.values["n_classes"])
