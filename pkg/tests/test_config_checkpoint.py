import numpy as np
import pytest
import torch

from omniseg.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from omniseg.config import SCHEMA, RunConfig
from omniseg.errors import CheckpointError, ConfigError
from omniseg.model import OmniSegModel

from helpers import randomize

TINY = "width=4\ndim=8\nheads=2\nqueries=3\nrounds=1\nfusion_layers=1\n"


def test_parse_comments_and_defaults():
    cfg = RunConfig.parse("# comment\n\nlr = 0.01  # inline\nimage_size=96x128\naugment=off\n")
    assert cfg["lr"] == 0.01 and cfg["image_size"] == (96, 128) and cfg["augment"] is False
    assert cfg["iterations"] == SCHEMA["iterations"][1]


@pytest.mark.parametrize("text, needle", [
    ("nope=1", "unknown key"),
    ("lr=-1", "out of range"),
    ("lr=abc", "bad value"),
    ("image_size=60x64", "out of range"),
    ("mode=4d", "out of range"),
    ("lr", "expected key=value"),
    ("lr=1\nlr=2", "duplicate"),
    ("aug_scale_min=2\naug_scale_max=1", "aug_scale_min"),
    ("disable_3d_fusion=1\nlate_fusion_only=1", "exclusive"),
])
def test_rejects_bad_configs(text, needle):
    with pytest.raises(ConfigError, match=needle):
        RunConfig.parse(text, "x.cfg")


def test_config_text_round_trip_and_hash():
    cfg = RunConfig.parse(TINY + "late_fusion_only=true\ndata=/somewhere\n")
    again = RunConfig.parse(cfg.to_text())
    assert again.hash() == cfg.hash()
    assert cfg.fusion == "late"
    # paths do not change the hash, hyperparameters do
    assert RunConfig.parse(TINY).hash() == RunConfig.parse(TINY + "out=/x\n").hash()
    assert RunConfig.parse(TINY).hash() != RunConfig.parse(TINY + "lr=0.002\n").hash()


def _model(cfg, seed=0):
    model = OmniSegModel(cfg.model_config(("room shell", "box", "ball")))
    randomize(model, seed, 0.3)
    return model


def test_checkpoint_round_trip_bit_identical(tmp_path):
    cfg = RunConfig.parse(TINY)
    model = _model(cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, cfg)
    loaded, cfg2 = load_checkpoint(path, cfg)
    assert cfg2.hash() == cfg.hash()
    a, b = model.state_dict(), loaded.state_dict()
    assert list(a) == list(b)
    for k in a:
        assert a[k].dtype == b[k].dtype == torch.float32
        assert torch.equal(a[k], b[k]), k
    save_checkpoint(tmp_path / "again.ckpt", loaded, cfg2)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_manifest_layout(tmp_path):
    cfg = RunConfig.parse(TINY + "disable_3d_fusion=true\n")
    model = _model(cfg)
    save_checkpoint(tmp_path / "m.ckpt", model, cfg)
    header, _, classes, params = read_checkpoint(tmp_path / "m.ckpt")
    assert header["version"] == "1" and header["config_hash"] == cfg.hash()
    assert header["disable_3d_fusion"] == "true" and header["fusion"] == "none"
    assert classes == ["room shell", "box", "ball"]
    assert set(params) == set(model.state_dict())
    raw = (tmp_path / "m.ckpt").read_bytes()
    blob = raw[raw.index(b"\nend\n") + 5:]
    assert len(blob) == 4 * sum(p.numel() for p in model.state_dict().values())
    # little-endian float32 at the declared offsets
    lines = raw[: raw.index(b"\nend\n")].decode().splitlines()
    name, *rest = [l for l in lines if l.startswith("param ")][3].split()[1:]
    off = int(rest[-1])
    ref = model.state_dict()[name].numpy().reshape(-1)
    assert np.array_equal(np.frombuffer(blob[off: off + 4 * ref.size], "<f4"), ref)


def test_checkpoint_hash_mismatch_fails_loudly(tmp_path):
    cfg = RunConfig.parse(TINY)
    save_checkpoint(tmp_path / "m.ckpt", _model(cfg), cfg)
    with pytest.raises(CheckpointError, match="config hash"):
        load_checkpoint(tmp_path / "m.ckpt", RunConfig.parse(TINY + "lr=0.5\n"))


@pytest.mark.parametrize("damage, needle", [
    (lambda raw: raw[:-8], "outside the blob"),
    (lambda raw: raw.replace(b"config lr=", b"config lr=9", 1), "does not match its hash"),
    (lambda raw: raw.replace(b"version=1", b"version=7", 1), "version"),
    (lambda raw: b"garbage" + raw, "not an omniseg checkpoint"),
])
def test_checkpoint_corruption_detected(tmp_path, damage, needle):
    cfg = RunConfig.parse(TINY)
    save_checkpoint(tmp_path / "m.ckpt", _model(cfg), cfg)
    (tmp_path / "m.ckpt").write_bytes(damage((tmp_path / "m.ckpt").read_bytes()))
    with pytest.raises(CheckpointError, match=needle):
        load_checkpoint(tmp_path / "m.ckpt")


def test_checkpoint_overlap_detected(tmp_path):
    cfg = RunConfig.parse(TINY)
    save_checkpoint(tmp_path / "m.ckpt", _model(cfg), cfg)
    raw = (tmp_path / "m.ckpt").read_bytes()
    head, blob = raw.split(b"\nend\n", 1)
    lines = head.decode().split("\n")
    i = next(j for j, l in enumerate(lines) if l.startswith("param ") and l.split()[-1] != "0")
    tok = lines[i].split()
    tok[-1] = str(int(tok[-1]) - 4)
    lines[i] = " ".join(tok)
    (tmp_path / "m.ckpt").write_bytes("\n".join(lines).encode() + b"\nend\n" + blob)
    with pytest.raises(CheckpointError, match="overlap"):
        read_checkpoint(tmp_path / "m.ckpt")


def test_checkpoint_duplicate_param_detected(tmp_path):
    cfg = RunConfig.parse(TINY)
    save_checkpoint(tmp_path / "m.ckpt", _model(cfg), cfg)
    raw = (tmp_path / "m.ckpt").read_bytes()
    head, blob = raw.split(b"\nend\n", 1)
    lines = head.decode().split("\n")
    first = next(l for l in lines if l.startswith("param "))
    (tmp_path / "m.ckpt").write_bytes("\n".join(lines + [first]).encode() + b"\nend\n" + blob)
    with pytest.raises(CheckpointError, match="twice"):
        read_checkpoint(tmp_path / "m.ckpt")
