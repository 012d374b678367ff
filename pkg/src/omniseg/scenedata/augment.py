"""Train-time augmentation and frame-window sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolation
from ..geometry import CameraIntrinsics
from .types import Frame


def _bilinear_grid(img, src_u, src_v):
    h, w = img.shape[:2]
    u = np.clip(src_u, 0, w - 1)
    v = np.clip(src_v, 0, h - 1)
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    return (1 - fv) * ((1 - fu) * img[v0, u0] + fu * img[v0, u1]) + fv * ((1 - fu) * img[v1, u0] + fu * img[v1, u1])


def augment_2d(frame: Frame, seed: int, *, scale_range=(0.1, 2.0), jitter=0.2, scale=None, offset=None,
               brightness=None, contrast=None) -> Frame:
    """Large-scale jitter (resize then crop/pad) plus colour jitter.

    Explicit ``scale``/``offset``/``brightness``/``contrast`` override the random draws.
    Padding gets depth 0 (missing), instance 0 and black RGB.
    """
    rng = np.random.default_rng(seed)
    s = float(rng.uniform(*scale_range)) if scale is None else float(scale)
    b = float(rng.uniform(-jitter, jitter)) if brightness is None else float(brightness)
    c = float(rng.uniform(1 - jitter, 1 + jitter)) if contrast is None else float(contrast)
    h, w = frame.depth.shape
    rh, rw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    if offset is None:
        oy = int(rng.integers(min(0, rh - h), max(0, rh - h) + 1))
        ox = int(rng.integers(min(0, rw - w), max(0, rw - w) + 1))
    else:
        oy, ox = offset
    # output pixel (a, b) shows resized pixel (a + oy, b + ox) = source pixel ((a + oy) / s, (b + ox) / s)
    rv, ru = np.mgrid[0:h, 0:w]
    rv = rv + oy
    ru = ru + ox
    inside = (rv >= 0) & (rv < rh) & (ru >= 0) & (ru < rw)
    sv, su = rv / s, ru / s
    nv = np.clip(np.round(sv).astype(int), 0, h - 1)
    nu = np.clip(np.round(su).astype(int), 0, w - 1)
    if s == 1.0 and ox == 0 and oy == 0:
        rgb = frame.rgb.copy()
    else:
        rgb = np.where(inside[..., None], _bilinear_grid(frame.rgb, su, sv), 0.0)
    depth = np.where(inside, frame.depth[nv, nu], 0.0)
    inst = np.where(inside, frame.gt_instance[nv, nu], 0)
    if b != 0.0 or c != 1.0:
        mean = rgb.mean()
        rgb = np.clip((rgb - mean) * c + mean + b, 0.0, 1.0)
    k = frame.intrinsics
    intr = CameraIntrinsics(k.fx * s, k.fy * s, k.cx * s - ox, k.cy * s - oy, w, h)
    return Frame(intr, frame.pose, rgb, depth, inst)


@dataclass(frozen=True)
class Transform3D:
    yaw: float
    scale: float
    sigma: float
    seed: int

    def apply(self, positions, jitter_seed: int = 0):
        p = np.asarray(positions, dtype=np.float64)
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        out = self.scale * (p @ rot.T)
        if self.sigma > 0:
            rng = np.random.default_rng([self.seed, jitter_seed])
            out = out + rng.normal(scale=self.sigma, size=out.shape)
        return out


def draw_transform_3d(seed: int, *, rotate=True, scale_range=(0.9, 1.1), sigma=0.005) -> Transform3D:
    rng = np.random.default_rng(seed)
    yaw = float(rng.uniform(0, 2 * np.pi)) if rotate else 0.0
    scale = float(rng.uniform(*scale_range))
    return Transform3D(yaw, scale, sigma, seed)


def augment_3d(positions, seed: int, *, rotate=True, scale_range=(0.9, 1.1), sigma=0.005):
    """Random rotation about the vertical axis, uniform scale and per-point jitter."""
    return draw_transform_3d(seed, rotate=rotate, scale_range=scale_range, sigma=sigma).apply(positions)


def sample_training_frames(n_frames: int, n: int, seed: int) -> list:
    """Half the time ``n`` consecutive indices, otherwise a run with random 1..4 skips."""
    if not 1 <= n <= n_frames:
        raise ContractViolation(f"need 1 <= n <= {n_frames}, got {n}")
    rng = np.random.default_rng(seed)
    if rng.random() < 0.5:
        start = int(rng.integers(0, n_frames - n + 1))
        return list(range(start, start + n))
    idx = [int(rng.integers(0, n_frames))]
    while len(idx) < n:
        nxt = idx[-1] + int(rng.integers(1, 5))
        if nxt >= n_frames:
            break
        idx.append(nxt)
    return idx
