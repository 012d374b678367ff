"""Scene directory format.

``intrinsics.txt``, ``frame_%04d.{pose.txt,rgb.ppm,depth.pgm,inst.pgm}``,
``labels.txt``, ``surface.xyz``, ``vocab.txt`` and an optional
``objects.txt`` carrying primitive geometry for re-rendering.
"""
from __future__ import annotations

import os
import re

import numpy as np

from ..errors import ContractViolation, SceneLoadError
from ..geometry import CameraIntrinsics, CameraPose
from .types import Frame, Scene, SceneObject, VocabEntry, Vocabulary


class InvariantViolation(SceneLoadError):
    """A scene file parsed but its contents break a scene invariant."""


def _fmt(x):
    return repr(float(x))


def write_ppm(path, rgb):
    img = np.clip(np.round(np.asarray(rgb) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def write_pgm16(path, values):
    arr = np.asarray(values)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
        raise ContractViolation(f"values out of 16-bit range for {path}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(arr.astype(">u2").tobytes())


def _read_netpbm(path, magic, channels):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise SceneLoadError(f"{path}: cannot read ({e.strerror})") from e
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(data, pos)
        if m is None:
            raise SceneLoadError(f"{path}: truncated header")
        tokens.append(m.group(2))
        pos = m.end()
    pos += 1  # single whitespace after maxval
    if tokens[0] != magic:
        raise SceneLoadError(f"{path}: expected {magic.decode()} file, got {tokens[0][:8]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise SceneLoadError(f"{path}: malformed header") from e
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = w * h * channels * dtype.itemsize
    body = data[pos:]
    if len(body) != need:
        raise SceneLoadError(f"{path}: expected {need} bytes of pixel data, found {len(body)} (truncated or corrupt)")
    arr = np.frombuffer(body, dtype=dtype).reshape((h, w, channels) if channels > 1 else (h, w))
    return arr, maxval


def read_ppm(path):
    arr, maxval = _read_netpbm(path, b"P6", 3)
    return arr.astype(np.float64) / maxval


def read_pgm16(path):
    arr, _ = _read_netpbm(path, b"P5", 1)
    return arr.astype(np.int64)


def _read_floats(path, count=None):
    try:
        with open(path) as f:
            vals = [float(t) for t in f.read().split()]
    except OSError as e:
        raise SceneLoadError(f"{path}: cannot read ({e.strerror})") from e
    except ValueError as e:
        raise SceneLoadError(f"{path}: non-numeric token ({e})") from e
    if count is not None and len(vals) != count:
        raise SceneLoadError(f"{path}: expected {count} numbers, found {len(vals)}")
    return vals


def save_scene(scene: Scene, directory):
    os.makedirs(directory, exist_ok=True)
    j = lambda name: os.path.join(directory, name)  # noqa: E731
    k = scene.frames[0].intrinsics if scene.frames else None
    with open(j("intrinsics.txt"), "w") as f:
        f.write(" ".join(_fmt(x) for x in k.as_tuple()[:4]) + f" {k.width} {k.height}\n")
    for i, fr in enumerate(scene.frames):
        if fr.intrinsics != k:
            raise ContractViolation("all frames of a scene must share intrinsics")
        m = fr.pose.matrix()
        with open(j(f"frame_{i:04d}.pose.txt"), "w") as f:
            for row in m:
                f.write(" ".join(_fmt(x) for x in row) + "\n")
        write_ppm(j(f"frame_{i:04d}.rgb.ppm"), fr.rgb)
        write_pgm16(j(f"frame_{i:04d}.depth.pgm"), np.round(np.asarray(fr.depth) * 1000.0).astype(np.int64))
        write_pgm16(j(f"frame_{i:04d}.inst.pgm"), fr.gt_instance)
    with open(j("labels.txt"), "w") as f:
        for o in scene.objects:
            f.write(f"{o.instance_id} {o.class_id}\n")
    with open(j("surface.xyz"), "w") as f:
        for row in scene.gt_surface_cloud:
            f.write(f"{_fmt(row[0])} {_fmt(row[1])} {_fmt(row[2])} {int(row[3])} {int(row[4])}\n")
    with open(j("vocab.txt"), "w") as f:
        for e in scene.vocabulary.entries:
            f.write(f"{e.class_id} {e.name}\n")
    with open(j("objects.txt"), "w") as f:
        for o in scene.objects:
            vals = [o.instance_id, o.shape, *o.center, *o.size, *o.albedo, o.yaw]
            f.write(" ".join(v if isinstance(v, str) else _fmt(v) if not isinstance(v, int) else str(v) for v in vals) + "\n")


def load_scene(directory) -> Scene:
    j = lambda name: os.path.join(directory, name)  # noqa: E731
    if not os.path.isdir(directory):
        raise SceneLoadError(f"{directory}: not a scene directory")
    vals = _read_floats(j("intrinsics.txt"), 6)
    try:
        intr = CameraIntrinsics(vals[0], vals[1], vals[2], vals[3], int(vals[4]), int(vals[5]))
    except ContractViolation as e:
        raise InvariantViolation(f"{j('intrinsics.txt')}: {e}") from e

    vocab = _load_vocab(j("vocab.txt"))
    n_frames = len([n for n in os.listdir(directory) if re.fullmatch(r"frame_\d{4}\.pose\.txt", n)])
    frames = []
    for i in range(n_frames):
        pose_path = j(f"frame_{i:04d}.pose.txt")
        m = np.array(_read_floats(pose_path, 16)).reshape(4, 4)
        try:
            pose = CameraPose.from_matrix(m)
        except ContractViolation as e:
            raise InvariantViolation(f"{pose_path}: invariant violation: {e}") from e
        rgb = read_ppm(j(f"frame_{i:04d}.rgb.ppm"))
        depth = read_pgm16(j(f"frame_{i:04d}.depth.pgm")) / 1000.0
        inst = read_pgm16(j(f"frame_{i:04d}.inst.pgm"))
        for name, arr in (("rgb.ppm", rgb), ("depth.pgm", depth), ("inst.pgm", inst)):
            if arr.shape[:2] != (intr.height, intr.width):
                raise SceneLoadError(
                    f"{j(f'frame_{i:04d}.{name}')}: size {arr.shape[1]}x{arr.shape[0]} "
                    f"does not match intrinsics {intr.width}x{intr.height}"
                )
        frames.append(Frame(intr, pose, rgb, depth, inst))

    labels = {}
    for ln, line in enumerate(_read_lines(j("labels.txt")), 1):
        parts = line.split()
        if len(parts) != 2:
            raise SceneLoadError(f"{j('labels.txt')}:{ln}: expected 'instance_id class_id'")
        iid, cid = int(parts[0]), int(parts[1])
        if not 0 <= cid < len(vocab):
            raise SceneLoadError(f"{j('labels.txt')}:{ln}: unknown class id {cid}")
        labels[iid] = cid
    for i, fr in enumerate(frames):
        bad = set(np.unique(fr.gt_instance).tolist()) - set(labels) - {0}
        if bad:
            raise InvariantViolation(f"{j(f'frame_{i:04d}.inst.pgm')}: instance ids {sorted(bad)} not in labels.txt")

    surf = _load_surface(j("surface.xyz"), labels, len(vocab))
    objects = _load_objects(j("objects.txt"), labels)
    return Scene(frames, objects, surf, vocab)


def _read_lines(path):
    try:
        with open(path) as f:
            return [ln for ln in f.read().splitlines() if ln.strip()]
    except OSError as e:
        raise SceneLoadError(f"{path}: cannot read ({e.strerror})") from e


def _load_vocab(path):
    entries = []
    for ln, line in enumerate(_read_lines(path), 1):
        parts = line.split(maxsplit=1)
        if len(parts) != 2:
            raise SceneLoadError(f"{path}:{ln}: expected 'class_id name words'")
        entries.append(VocabEntry(int(parts[0]), parts[1].strip()))
    try:
        return Vocabulary(tuple(entries))
    except ValueError as e:
        raise SceneLoadError(f"{path}: {e}") from e


def _load_surface(path, labels, n_classes):
    rows = []
    for ln, line in enumerate(_read_lines(path), 1):
        parts = line.split()
        if len(parts) != 5:
            raise SceneLoadError(f"{path}:{ln}: expected 'x y z instance_id class_id'")
        try:
            x, y, z = (float(p) for p in parts[:3])
            iid, cid = int(parts[3]), int(parts[4])
        except ValueError as e:
            raise SceneLoadError(f"{path}:{ln}: {e}") from e
        if not 0 <= cid < n_classes or (iid != 0 and labels.get(iid) != cid):
            raise SceneLoadError(f"{path}:{ln}: label ({iid}, {cid}) inconsistent with labels.txt/vocab.txt")
        rows.append((x, y, z, iid, cid))
    return np.array(rows, dtype=np.float64).reshape(-1, 5)


def _load_objects(path, labels):
    if not os.path.exists(path):
        return [SceneObject("unknown", np.zeros(3), np.zeros(3), np.zeros(3), c, i) for i, c in sorted(labels.items())]
    objects = []
    for ln, line in enumerate(_read_lines(path), 1):
        p = line.split()
        if len(p) != 12:
            raise SceneLoadError(f"{path}:{ln}: expected 12 fields")
        iid = int(p[0])
        if iid not in labels:
            raise SceneLoadError(f"{path}:{ln}: instance {iid} missing from labels.txt")
        f = [float(x) for x in p[2:]]
        objects.append(SceneObject(p[1], np.array(f[0:3]), np.array(f[3:6]), np.array(f[6:9]), labels[iid], iid, f[9]))
    return objects
