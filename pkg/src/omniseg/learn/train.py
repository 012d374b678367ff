"""Training loop with alternating 2D / 3D batches."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ConfigError
from ..model import OmniSegModel, ViewBatch
from ..scenedata import augment_2d, draw_transform_3d, sample_training_frames
from .losses import GroundTruth, compute_losses
from .matching import LossWeights
from .optim import make_optimizer, optimizer_step, set_lr

MODES = ("2d", "3d", "joint")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    lr: float = 1e-3
    decay_at: float = 0.8  # fraction of iterations after which lr drops 10x
    clip: float = 1.0
    seed: int = 0
    mode: str = "3d"
    views: int = 4  # frames per 3D batch
    augment: bool = True
    aug_scale_min: float = 0.8
    aug_scale_max: float = 1.25
    aug_jitter: float = 0.1
    aug_rotate: bool = True
    weights: LossWeights = LossWeights()
    eval_every: int = 0
    checkpoint_every: int = 0

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 0 or self.views < 1 or self.lr <= 0:
            raise ConfigError("iterations >= 0, views >= 1 and lr > 0 required")
        if not 0 < self.aug_scale_min <= self.aug_scale_max:
            raise ConfigError("need 0 < aug_scale_min <= aug_scale_max")
        return self


def frame_targets(frames, instance_classes, stride=4) -> GroundTruth:
    """Stride-4 nearest-sampled instance ids -> one target per id (id 0 is the room shell, class 0)."""
    ids = np.concatenate([f.gt_instance[::stride, ::stride].reshape(-1) for f in frames])
    present = np.unique(ids)
    classes = [0 if i == 0 else instance_classes[int(i)] for i in present]
    masks = ids[None, :] == present[:, None]
    return GroundTruth(torch.as_tensor(classes, dtype=torch.long), torch.as_tensor(masks, dtype=torch.float32))


def batch_mode(cfg: TrainConfig, it: int) -> str:
    if cfg.mode == "joint":
        return "2d" if it % 2 == 0 else "3d"
    return cfg.mode


def make_batch(scenes, cfg: TrainConfig, it: int, mode: str, dtype=torch.float32):
    rng = np.random.default_rng([cfg.seed, it])
    scene = scenes[int(rng.integers(len(scenes)))]
    if mode == "2d":
        idx = [int(rng.integers(scene.num_views))]
    else:
        idx = sample_training_frames(scene.num_views, min(cfg.views, scene.num_views), int(rng.integers(2**31)))
    frames = [scene.frames[i] for i in idx]
    if cfg.augment:
        frames = [
            augment_2d(f, int(rng.integers(2**31)), scale_range=(cfg.aug_scale_min, cfg.aug_scale_max), jitter=cfg.aug_jitter)
            for f in frames
        ]
    transform = None
    if mode == "3d" and cfg.augment:
        transform = draw_transform_3d(int(rng.integers(2**31)), rotate=cfg.aug_rotate)
    batch = ViewBatch.from_frames(frames, with_depth=mode == "3d", transform=transform).to(dtype)
    return batch, frame_targets(frames, scene.instance_classes())


def lr_at(cfg: TrainConfig, it: int):
    return cfg.lr * (0.1 if it >= math.ceil(cfg.decay_at * cfg.iterations) else 1.0)


def format_log(it, total, terms, extra=None):
    line = f"{it} {total:.6f} {terms['class']:.6f} {terms['bce']:.6f} {terms['dice']:.6f}"
    for k, v in (extra or {}).items():
        line += f" {k}={v:.6f}"
    return line


def train_loop(model: OmniSegModel, cfg: TrainConfig, scenes3d, scenes2d=None, log=None, on_checkpoint=None, on_eval=None):
    """Train in place. ``log`` is a writable text stream for metrics lines.

    Returns a list of per-iteration dicts (it, mode, total, class, bce, dice).
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    dtype = next(model.parameters()).dtype
    opt = make_optimizer(model.parameters(), cfg.lr)
    history = []
    for it in range(cfg.iterations):
        mode = batch_mode(cfg, it)
        pool = scenes2d if (mode == "2d" and scenes2d) else scenes3d
        batch, gt = make_batch(pool, cfg, it, mode, dtype)
        set_lr(opt, lr_at(cfg, it))
        pred = model(batch)
        total, terms, _ = compute_losses(pred.rounds, gt, cfg.weights)
        total.backward()
        optimizer_step(opt, cfg.clip)
        rec = dict(it=it, mode=mode, total=float(total.detach()), **{k: float(v.detach()) for k, v in terms.items()})
        extra = None
        if on_eval is not None and cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            extra = on_eval(model, it)
            rec.update(extra)
        history.append(rec)
        if log is not None:
            log.write(format_log(it, rec["total"], rec, extra) + "\n")
            log.flush()
        if on_checkpoint is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(model, it)
    return history
