"""Checkpoint file: ASCII header + manifest, then a little-endian float32 blob.

    omniseg-checkpoint version=1 config_hash=<hex> fusion=<mode> <ablation switches>
    config <key>=<value>          (one per line)
    class <name>                  (vocabulary order)
    param <name> float32 <dims...> <byte_offset>
    end
    <raw bytes>
"""
from __future__ import annotations

import os

import numpy as np
import torch

from .config import RunConfig
from .errors import CheckpointError
from .model import OmniSegModel

FORMAT_VERSION = 1
MAGIC = "omniseg-checkpoint"


def save_checkpoint(path, model: OmniSegModel, config: RunConfig):
    switches = " ".join(f"{k}={str(config[k]).lower()}" for k in ("disable_3d_fusion", "late_fusion_only"))
    lines = [f"{MAGIC} version={FORMAT_VERSION} config_hash={config.hash()} fusion={config.fusion} {switches}"]
    lines += [f"config {line}" for line in config.to_text().splitlines()]
    lines += [f"class {name}" for name in model.config.class_names]
    blobs = []
    offset = 0
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f4")
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"param {name} float32 {dims} {offset}".replace("  ", " "))
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    lines.append("end")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def read_checkpoint(path):
    """Returns (header dict, RunConfig, class names, {name: float32 array})."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    marker = data.find(b"\nend\n")
    if not data.startswith(MAGIC.encode()) or marker < 0:
        raise CheckpointError(f"{path}: not an omniseg checkpoint")
    head = data[:marker].decode("ascii").splitlines()
    blob = data[marker + 5 :]
    header = dict(tok.split("=", 1) for tok in head[0].split()[1:])
    if int(header.get("version", -1)) != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    cfg_lines, classes, params = [], [], {}
    spans = []
    for n, line in enumerate(head[1:], 2):
        kind, _, rest = line.partition(" ")
        if kind == "config":
            cfg_lines.append(rest)
        elif kind == "class":
            classes.append(rest)
        elif kind == "param":
            tok = rest.split()
            if len(tok) < 3 or tok[1] != "float32":
                raise CheckpointError(f"{path}:{n}: malformed param line")
            name, dims, off = tok[0], [int(d) for d in tok[2:-1]], int(tok[-1])
            if name in params:
                raise CheckpointError(f"{path}:{n}: {name} listed twice")
            count = int(np.prod(dims)) if dims else 1
            end = off + 4 * count
            if off < 0 or end > len(blob):
                raise CheckpointError(f"{path}:{n}: {name} lies outside the blob")
            spans.append((off, end, name))
            params[name] = np.frombuffer(blob[off:end], dtype="<f4").reshape(dims)
        else:
            raise CheckpointError(f"{path}:{n}: unknown manifest line {kind!r}")
    spans.sort()
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"{path}: {an} and {bn} overlap")
    config = RunConfig.parse("\n".join(cfg_lines), f"{path} (embedded config)")
    if config.hash() != header.get("config_hash"):
        raise CheckpointError(f"{path}: embedded config does not match its hash")
    return header, config, classes, params


def load_checkpoint(path, expected_config: RunConfig | None = None, dtype=torch.float32):
    header, config, classes, params = read_checkpoint(path)
    if expected_config is not None and expected_config.hash() != header["config_hash"]:
        raise CheckpointError(
            f"{path}: config hash {header['config_hash']} does not match the provided config ({expected_config.hash()})"
        )
    model = OmniSegModel(config.model_config(classes))
    state = model.state_dict()
    missing = set(state) - set(params)
    extra = set(params) - set(state)
    if missing or extra:
        raise CheckpointError(f"{path}: parameter mismatch, missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    for name, arr in params.items():
        if tuple(arr.shape) != tuple(state[name].shape):
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, model expects {tuple(state[name].shape)}")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in params.items()})
    return model.to(dtype), config
