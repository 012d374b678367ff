import os
import re

import pytest

from omniseg.cli import main

TINY = "width=4\ndim=8\nheads=2\nqueries=3\nrounds=1\nfusion_layers=1\niterations=10\n"


def tree_bytes(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(d), "--scenes", "4", "--seed", "7", "--hole-rate", "0.1"]) == 0
    return d


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    p.write_text(TINY)
    return p


def test_synth_writes_scenes_and_split(data):
    lines = [l.split() for l in (data / "manifest.txt").read_text().splitlines() if not l.startswith("#")]
    assert [s for _, s in lines] == ["train", "train", "train", "test"]
    for name, _ in lines:
        assert (data / name / "intrinsics.txt").exists()


def test_synth_is_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / sub), "--scenes", "2", "--seed", "1"]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert sum(1 for n in os.listdir(tmp_path / "a") if n.startswith("scene_")) == 2


def test_train_reproducible_and_records_switches(data, tiny_cfg, tmp_path):
    logs = []
    for sub in ("a", "b"):
        assert main(["train", "--config", str(tiny_cfg), "--data", str(data), "--out", str(tmp_path / sub)]) == 0
        logs.append((tmp_path / sub / "metrics.log").read_text())
    assert logs[0] == logs[1]
    rows = [l for l in logs[0].splitlines() if not l.startswith("#")]
    assert len(rows) == 10
    assert "disable_3d_fusion=false" in logs[0]
    assert main(["train", "--config", str(tiny_cfg), "--data", str(data), "--out", str(tmp_path / "c"),
                 "--disable-3d-fusion", "--iterations", "2"]) == 0
    head = (tmp_path / "c" / "model.ckpt").read_bytes().split(b"\n", 1)[0].decode()
    assert "disable_3d_fusion=true" in head and "fusion=none" in head
    assert not (tmp_path / "c" / "run.lock").exists()


def test_train_2d_on_single_frame_scenes(tiny_cfg, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--scenes", "2", "--views", "1"]) == 0
    assert main(["train", "--config", str(tiny_cfg), "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r"),
                 "--mode", "2d", "--iterations", "3"]) == 0
    assert "mode=2d" in (tmp_path / "r" / "metrics.log").read_text()


def test_eval_checkpoint_and_hash_mismatch(data, tmp_path, capsys):
    run = tmp_path / "run"
    cfg = tmp_path / "short.cfg"
    cfg.write_text(TINY.replace("iterations=10", "iterations=2"))
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    ckpt = str(run / "model.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(data), "--config", str(cfg)]) == 0
    assert (run / "eval_pixels_views4.txt").exists() and (run / "eval_pixels_views4.csv").exists()
    other = tmp_path / "other.cfg"
    other.write_text(TINY + "lr=0.01\n")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(data), "--config", str(other)]) == 2
    assert "config hash" in capsys.readouterr().err


def test_eval_oracle_and_view_rows(data, tmp_path, capsys):
    out = tmp_path / "o"
    for views in ("1", None):
        argv = ["eval", "--checkpoint", "oracle", "--data", str(data), "--out", str(out)]
        assert main(argv + (["--views", views] if views else [])) == 0
    text = capsys.readouterr().out
    assert re.search(r"^mAP 1\.000000$", text, re.M) and re.search(r"^mAP25 1\.000000$", text, re.M)
    rows = (out / "eval_pixels_views.csv").read_text().splitlines()
    assert rows[0] == "views,mAP,mAP50,mAP25,mIoU"
    assert [r.split(",")[0] for r in rows[1:]] == ["1", "4"]
    assert main(["eval", "--checkpoint", "oracle", "--data", str(data), "--out", str(out), "--domain", "mesh"]) == 0
    assert "mAP25 1.000000" in capsys.readouterr().out


def test_eval_errors(data, tmp_path):
    assert main(["eval", "--checkpoint", "oracle", "--data", str(data), "--views", "9", "--out", str(tmp_path)]) == 2
    assert main(["eval", "--checkpoint", "oracle", "--data", str(data), "--domain", "mesh", "--views", "1"]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", str(data)]) == 2
    assert main(["eval", "--checkpoint", "oracle", "--data", str(tmp_path / "nowhere")]) == 2


def test_user_errors_exit_1(tmp_path):
    assert main(["frobnicate"]) == 1
    assert main(["synth", "--out", str(tmp_path), "--scenes", "2", "--size", "big"]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("width=4\nunknown_key=3\n")
    assert main(["train", "--config", str(bad), "--data", str(tmp_path), "--out", str(tmp_path / "r")]) == 1


def test_run_lock(tmp_path):
    (tmp_path / "run.lock").write_text(f"{os.getpid()}\n")  # live owner
    assert main(["synth", "--out", str(tmp_path), "--scenes", "1"]) == 1
    (tmp_path / "run.lock").write_text("999999999\n")  # stale
    assert main(["synth", "--out", str(tmp_path), "--scenes", "1"]) == 0
    assert not (tmp_path / "run.lock").exists()


def test_plot_svg_and_csv(tmp_path):
    m = tmp_path / "metrics.log"
    m.write_text("# header\n0 3.0 1.0 1.0 1.0\n1 2.0 0.5 0.5 1.0 mAP=0.25\n")
    assert main(["plot", "--metrics", str(m), "--out", str(tmp_path / "p.svg")]) == 0
    svg = (tmp_path / "p.svg").read_text()
    assert svg.startswith("<svg") and ">it</text>" in svg
    total = re.search(r'points="([^"]*)"><title>total<', svg).group(1)
    assert len(total.split()) == 2
    assert main(["plot", "--metrics", str(m), "--out", str(tmp_path / "p.csv")]) == 0
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "it,total,class,bce,dice,mAP"
    assert rows[1].endswith(",nan") and rows[2].endswith(",0.25")


def test_plot_errors(tmp_path, capsys):
    empty = tmp_path / "empty.log"
    empty.write_text("")
    assert main(["plot", "--metrics", str(empty), "--out", str(tmp_path / "e.svg")]) != 0
    bad = tmp_path / "bad.log"
    bad.write_text("0 1 1 1 1\n1 x 1 1 1\n")
    assert main(["plot", "--metrics", str(bad), "--out", str(tmp_path / "b.svg")]) != 0
    assert "bad.log:2" in capsys.readouterr().err


def test_gradcheck_negative_control_exit_3(capsys):
    assert main(["gradcheck", "--corrupt", "deform.value.weight=1.001"]) == 3
    captured = capsys.readouterr()
    names = [l.split()[0] for l in captured.out.splitlines() if l.split()[-1] in ("ok", "FAIL")]
    assert len(names) == len(set(names)) > 200
    assert "deform.value.weight" in captured.err
