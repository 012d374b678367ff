import numpy as np
import torch

from omniseg.geometry import CameraIntrinsics, CameraPose
from omniseg.scenedata import look_at


def randomize(module, seed=0, std=0.3):
    """Overwrite every parameter (zero-initialized ones included) with Gaussian noise."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return module


def facing_camera(h, w, eye=(0.0, 1.0, -2.0), target=(0.0, 1.0, 0.0), f=None):
    f = f or 0.8 * w
    intr = CameraIntrinsics(f, f, (w - 1) / 2, (h - 1) / 2, w, h)
    return intr, look_at(np.array(eye, float), np.array(target, float))


def shifted(pose: CameraPose, t):
    m = pose.matrix().copy()
    m[:3, 3] += t
    return CameraPose.from_matrix(m)


def rotated_y(pose: CameraPose, quarter_turns=1):
    a = np.pi / 2 * quarter_turns
    r = np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])
    m = pose.matrix().copy()
    m[:3, :3] = r @ m[:3, :3]
    m[:3, 3] = r @ m[:3, 3]
    return CameraPose.from_matrix(m)
