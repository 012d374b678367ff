"""Procedural rooms rendered by per-pixel analytic ray casting.

World frame: y is up, the floor is y = 0 and the room is centred on x = z = 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolation, GenerationError
from ..geometry import CameraIntrinsics, CameraPose, pixel_rays
from .types import DEFAULT_VOCABULARY, Frame, Scene, SceneObject, Vocabulary

LIGHT_DIR = np.array([0.35, 1.0, 0.55]) / np.linalg.norm([0.35, 1.0, 0.55])
AMBIENT = 0.45
MAX_ATTEMPTS = 10_000


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    fov_deg: float = 80.0
    room: tuple = (4.0, 3.0, 4.0)
    min_objects: int = 3
    max_objects: int = 6
    n_classes: int = 4
    views: int = 4
    ring_radius: float = 1.6
    camera_height: float = 1.5
    look_height: float = 0.4
    angle_jitter: float = 0.15
    position_jitter: float = 0.1
    target_jitter: float = 0.2
    wall_margin: float = 0.1
    object_gap: float = 0.05
    samples_per_object: int = 512
    shell_samples: int = 2048
    albedo_jitter: float = 0.0

    def validate(self):
        if min(self.room) <= 0:
            raise ContractViolation("room size must be positive")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ContractViolation("object count range is invalid")
        if self.views < 1:
            raise ContractViolation("need at least one view")
        if self.width < 1 or self.height < 1 or not 0 < self.fov_deg < 180:
            raise ContractViolation("invalid image size or field of view")

    def intrinsics(self) -> CameraIntrinsics:
        f = 0.5 * self.width / np.tan(np.deg2rad(self.fov_deg) / 2)
        return CameraIntrinsics(f, f, (self.width - 1) / 2, (self.height - 1) / 2, self.width, self.height)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> CameraPose:
    f = np.asarray(target, float) - np.asarray(eye, float)
    f /= np.linalg.norm(f)
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return CameraPose(np.stack([right, down, f], axis=1), np.asarray(eye, float))


# ---------------------------------------------------------------------------
# ray/primitive intersection; every function returns (t, normal) with t = inf on miss


def _hit_sphere(o, d, obj):
    oc = o - obj.center
    a = (d * d).sum(-1)
    b = 2 * (d * oc).sum(-1)
    c = (oc * oc).sum(-1) - obj.radius**2
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = (-b - sq) / (2 * a)
    t = np.where(ok & (t > 1e-9), t, np.inf)
    n = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d - obj.center
    n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    return t, n


def _yaw_matrix(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _hit_cuboid(o, d, obj):
    rot = _yaw_matrix(obj.yaw)
    lo_o = (o - obj.center) @ rot  # into the box frame
    lo_d = d @ rot
    half = obj.size / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / lo_d
        t1 = (-half - lo_o) * inv
        t2 = (half - lo_o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t_near = tmin.max(-1)
    t_far = tmax.min(-1)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    t = np.where(hit, t_near, np.inf)
    axis = tmin.argmax(-1)
    sign = -np.sign(np.take_along_axis(lo_d, axis[..., None], -1)[..., 0])
    n_local = np.zeros(d.shape)
    np.put_along_axis(n_local, axis[..., None], sign[..., None], -1)
    return t, n_local @ rot.T


def _hit_shell(o, d, room):
    """Exit point of rays starting inside the room box; normals point inward."""
    lo = np.array([-room[0] / 2, 0.0, -room[2] / 2])
    hi = np.array([room[0] / 2, room[1], room[2] / 2])
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = (hi - o) / d
        t_lo = (lo - o) / d
    t_axis = np.where(d > 0, t_hi, np.where(d < 0, t_lo, np.inf))
    axis = t_axis.argmin(-1)
    t = np.take_along_axis(t_axis, axis[..., None], -1)[..., 0]
    n = np.zeros(d.shape)
    s = -np.sign(np.take_along_axis(d, axis[..., None], -1)[..., 0])
    np.put_along_axis(n, axis[..., None], s[..., None], -1)
    return t, n, axis


def _shell_albedo(axis, n, base):
    # floor darker, ceiling lighter; all one semantic class
    base = np.asarray(base)
    floor = (axis == 1) & (n[..., 1] > 0)
    ceil = (axis == 1) & (n[..., 1] < 0)
    alb = np.broadcast_to(base, n.shape).copy()
    alb[floor] = base * 0.8
    alb[ceil] = np.minimum(base * 1.15, 1.0)
    return alb


def render_frame(intrinsics: CameraIntrinsics, pose: CameraPose, objects, room, shell_albedo) -> Frame:
    rays = pixel_rays(intrinsics) @ pose.rotation.T  # world dirs, camera z = 1
    o = np.broadcast_to(pose.translation, rays.shape)
    t, n, axis = _hit_shell(o, rays, room)
    albedo = _shell_albedo(axis, n, shell_albedo)
    inst = np.zeros(t.shape, dtype=np.int64)
    for obj in objects:
        ht, hn = (_hit_sphere if obj.shape == "sphere" else _hit_cuboid)(o, rays, obj)
        closer = ht < t
        t = np.where(closer, ht, t)
        n = np.where(closer[..., None], hn, n)
        albedo = np.where(closer[..., None], obj.albedo, albedo)
        inst = np.where(closer, obj.instance_id, inst)
    shade = AMBIENT + (1 - AMBIENT) * np.clip(n @ LIGHT_DIR, 0.0, 1.0)
    rgb = np.clip(albedo * shade[..., None], 0.0, 1.0)
    rgb = np.round(rgb * 255) / 255  # 8-bit sensor
    return Frame(intrinsics, pose, rgb, t, inst)


# ---------------------------------------------------------------------------
# object placement and surface sampling


def _place_objects(rng, cfg: SceneConfig, vocab: Vocabulary):
    classes = vocab.object_classes()
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    if count and not classes:
        raise GenerationError("vocabulary has no object classes")
    objects = []
    attempts = 0
    hx, hz = cfg.room[0] / 2, cfg.room[2] / 2
    while len(objects) < count:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise GenerationError(f"could not place {count} non-overlapping objects in {MAX_ATTEMPTS} attempts")
        cls = int(classes[rng.integers(len(classes))])
        entry = vocab.entries[cls]
        if entry.shape == "sphere":
            r = rng.uniform(0.15, 0.5)
            size = np.array([r, r, r])
            yaw = 0.0
            height = 2 * r
        else:
            size = _cuboid_size(rng, entry.name)
            yaw = float(rng.uniform(0, np.pi / 2))
            height = size[1]
        albedo = np.clip(np.asarray(entry.albedo) + rng.uniform(-1, 1, 3) * cfg.albedo_jitter, 0, 1)
        cand = SceneObject(entry.shape, np.zeros(3), size, albedo, cls, len(objects) + 1, yaw)
        fr = cand.footprint_radius()
        lim_x, lim_z = hx - fr - cfg.wall_margin, hz - fr - cfg.wall_margin
        if lim_x <= 0 or lim_z <= 0:
            continue
        x, z = rng.uniform(-lim_x, lim_x), rng.uniform(-lim_z, lim_z)
        cand.center = np.array([x, height / 2, z])
        if all(np.hypot(x - o.center[0], z - o.center[2]) > fr + o.footprint_radius() + cfg.object_gap for o in objects):
            objects.append(cand)
    return objects


def _cuboid_size(rng, name):
    if "tall" in name:
        return np.array([rng.uniform(0.3, 0.6), rng.uniform(0.7, 1.0), rng.uniform(0.3, 0.6)])
    if "low" in name:
        return np.array([rng.uniform(0.6, 1.0), rng.uniform(0.3, 0.45), rng.uniform(0.6, 1.0)])
    if "curtain" in name:
        return np.array([rng.uniform(0.6, 1.0), rng.uniform(0.8, 1.0), rng.uniform(0.05, 0.1)])
    return rng.uniform(0.3, 0.8, size=3)


def _sample_cuboid(rng, obj, n):
    sx, sy, sz = obj.size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-0.5, 0.5, size=(n, 3)) * obj.size
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    pts[np.arange(n), axis] = sign * obj.size[axis]
    return pts @ _yaw_matrix(obj.yaw).T + obj.center


def _sample_sphere(rng, obj, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return obj.center + obj.radius * v


def _sample_shell(rng, room, n):
    sx, sy, sz = room
    box = SceneObject("cuboid", np.array([0.0, sy / 2, 0.0]), np.array(room, float), np.zeros(3), 0, 0)
    return _sample_cuboid(rng, box, n)


def generate_scene(seed: int, config: SceneConfig = SceneConfig(), vocabulary: Vocabulary | None = None) -> Scene:
    """Deterministic scene for ``seed``; layouts leaving an object unseen by every view are redrawn."""
    config.validate()
    vocab = vocabulary if vocabulary is not None else DEFAULT_VOCABULARY.truncated(config.n_classes)
    rng = np.random.default_rng(seed)
    intr = config.intrinsics()
    for _ in range(100):
        objects = _place_objects(rng, config, vocab)
        frames = []
        base = rng.uniform(0, 2 * np.pi)
        for v in range(config.views):
            ang = base + 2 * np.pi * v / config.views + rng.uniform(-1, 1) * config.angle_jitter
            rad = config.ring_radius + rng.uniform(-1, 1) * config.position_jitter
            height = config.camera_height + rng.uniform(-1, 1) * config.position_jitter
            eye = np.array([rad * np.cos(ang), height, rad * np.sin(ang)])
            target = np.array([0.0, config.look_height, 0.0]) + rng.uniform(-1, 1, 3) * config.target_jitter
            frames.append(render_frame(intr, look_at(eye, target), objects, config.room, vocab.entries[0].albedo))
        seen = set()
        for f in frames:
            seen.update(np.unique(f.gt_instance).tolist())
        if all(o.instance_id in seen for o in objects):
            break
    else:
        raise GenerationError("no layout with every object visible after 100 redraws")
    surf = []
    for obj in objects:
        sampler = _sample_sphere if obj.shape == "sphere" else _sample_cuboid
        p = sampler(rng, obj, config.samples_per_object)
        surf.append(np.column_stack([p, np.full(len(p), obj.instance_id), np.full(len(p), obj.class_id)]))
    shell = _sample_shell(rng, config.room, config.shell_samples)
    surf.append(np.column_stack([shell, np.zeros(len(shell)), np.zeros(len(shell))]))
    return Scene(frames, objects, np.concatenate(surf), vocab)


def simulate_depth_holes(scene: Scene, hole_rate: float, seed: int) -> Scene:
    """Zero depth at a ``hole_rate`` fraction of pixels on instance boundaries."""
    if not 0 <= hole_rate <= 1:
        raise ContractViolation(f"hole_rate must be in [0, 1], got {hole_rate}")
    rng = np.random.default_rng(seed)
    frames = []
    for f in scene.frames:
        g = f.gt_instance
        edge = np.zeros(g.shape, bool)
        edge[1:] |= g[1:] != g[:-1]
        edge[:-1] |= g[:-1] != g[1:]
        edge[:, 1:] |= g[:, 1:] != g[:, :-1]
        edge[:, :-1] |= g[:, :-1] != g[:, 1:]
        drop = edge & (rng.random(g.shape) < hole_rate)
        if hole_rate >= 1:
            drop = edge
        frames.append(f.replace(depth=np.where(drop, 0.0, f.depth)))
    return Scene(frames, scene.objects, scene.gt_surface_cloud, scene.vocabulary)
