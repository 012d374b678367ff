"""``omniseg`` command line: synth, train, eval, gradcheck, plot.

Exit codes: 0 success, 1 user error (flags/config), 2 data error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager

import numpy as np

from .errors import CheckpointError, ConfigError, ContractViolation, GenerationError, OmnisegError, SceneLoadError

EXIT_OK, EXIT_USER, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
MANIFEST = "manifest.txt"
VIEW_METRICS = ("mAP", "mAP50", "mAP25", "mIoU")


class UserError(OmnisegError):
    pass


class DataError(OmnisegError):
    pass


class VerificationFailure(OmnisegError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UserError(f"{self.prog}: {message}")


def threads():
    raw = os.environ.get("OMNISEG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as e:
        raise UserError(f"OMNISEG_THREADS must be an integer, got {raw!r}") from e
    if n < 1:
        raise UserError("OMNISEG_THREADS must be >= 1")
    return n


@contextmanager
def run_lock(directory):
    """One invocation owns an output directory; a lock left by a dead process is stale."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "run.lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        try:
            pid = int(open(path).read().strip() or 0)
        except (OSError, ValueError):
            pid = 0
        if pid and _alive(pid):
            raise UserError(f"{directory} is in use by process {pid} ({path})")
        os.remove(path)
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    with os.fdopen(fd, "w") as f:
        f.write(f"{os.getpid()}\n")
    try:
        yield
    finally:
        try:
            os.remove(path)
        except OSError:
            pass


def _alive(pid):
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _parse_size(text):
    h, sep, w = text.lower().partition("x")
    try:
        size = int(h), int(w)
    except ValueError:
        raise UserError(f"--size must look like HxW, got {text!r}") from None
    if not sep or min(size) < 1:
        raise UserError(f"--size must look like HxW, got {text!r}")
    return size


# ---------------------------------------------------------------- synth


def _synth_one(job):
    from .scenedata import SceneConfig, generate_scene, save_scene, simulate_depth_holes

    seed, cfg_kwargs, hole_rate, path = job
    scene = generate_scene(seed, SceneConfig(**cfg_kwargs))
    if hole_rate > 0:
        scene = simulate_depth_holes(scene, hole_rate, seed)
    save_scene(scene, path)
    return path


def cmd_synth(args):
    h, w = _parse_size(args.size)
    if args.scenes < 1 or args.views < 1:
        raise UserError("--scenes and --views must be positive")
    if not 0 <= args.hole_rate <= 1:
        raise UserError("--hole-rate must be in [0, 1]")
    if not 1 <= args.classes <= 6:
        raise UserError("--classes must be in 1..6")
    cfg = dict(width=w, height=h, views=args.views, n_classes=args.classes)
    with run_lock(args.out):
        names = [f"scene_{args.seed + i:06d}" for i in range(args.scenes)]
        jobs = [(args.seed + i, cfg, args.hole_rate, os.path.join(args.out, n)) for i, n in enumerate(names)]
        try:
            if threads() > 1 and len(jobs) > 1:
                with ProcessPoolExecutor(min(threads(), len(jobs))) as pool:
                    list(pool.map(_synth_one, jobs))
            else:
                for job in jobs:
                    _synth_one(job)
        except OSError as e:
            raise DataError(f"cannot write scenes under {args.out}: {e}") from e
        except (GenerationError, ContractViolation) as e:
            raise DataError(f"scene generation failed: {e}") from e
        n_train = args.scenes - max(1, round(args.scenes * args.test_fraction)) if args.scenes > 1 else 1
        lines = [f"# omniseg synth seed={args.seed} scenes={args.scenes} views={args.views} size={h}x{w} "
                 f"classes={args.classes} hole_rate={args.hole_rate}"]
        lines += [f"{n} {'train' if i < n_train else 'test'}" for i, n in enumerate(names)]
        with open(os.path.join(args.out, MANIFEST), "w") as f:
            f.write("\n".join(lines) + "\n")
    print(f"wrote {args.scenes} scenes ({n_train} train, {args.scenes - n_train} test) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- data


def read_manifest(data_dir):
    path = os.path.join(data_dir, MANIFEST)
    try:
        lines = open(path).read().splitlines()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from e
    out = []
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("train", "test"):
            raise DataError(f"{path}:{n}: expected '<scene dir> train|test'")
        out.append((parts[0], parts[1]))
    if not out:
        raise DataError(f"{path}: no scenes listed")
    return out


def load_split(data_dir, split):
    from .scenedata import load_scene

    names = [n for n, s in read_manifest(data_dir) if s == split]
    if not names:
        raise DataError(f"{data_dir}: manifest lists no {split} scenes")
    try:
        return [load_scene(os.path.join(data_dir, n)) for n in names]
    except SceneLoadError as e:
        raise DataError(str(e)) from e


def _class_names(scenes):
    names = scenes[0].vocabulary.names
    for s in scenes[1:]:
        if s.vocabulary.names != names:
            raise DataError("scenes disagree on the class vocabulary")
    return tuple(names)


# ---------------------------------------------------------------- train


def _load_config(path, overrides):
    from .config import RunConfig

    cfg = RunConfig.load(path) if path else RunConfig()
    for key, value in overrides.items():
        if value is not None:
            cfg.set(key, str(value), f"--{key.replace('_', '-')}")
    return cfg.validate("flags")


def cmd_train(args):
    import torch

    from .checkpoint import save_checkpoint
    from .inference import evaluate_scenes
    from .learn import train_loop
    from .model import OmniSegModel

    cfg = _load_config(args.config, dict(
        mode=args.mode, iterations=args.iterations, seed=args.seed,
        disable_3d_fusion="true" if args.disable_3d_fusion else None,
        late_fusion_only="true" if args.late_fusion_only else None,
    ))
    data = args.data or cfg["data"]
    out = args.out or cfg["out"]
    if not data or not out:
        raise UserError("--data and --out are required (or data=/out= in the config)")
    torch.set_num_threads(threads())
    train = load_split(data, "train")
    test = [n for n, s in read_manifest(data) if s == "test"]
    test = load_split(data, "test") if test and cfg["eval_every"] else []
    torch.manual_seed(cfg["seed"])
    model = OmniSegModel(cfg.model_config(_class_names(train)))
    tcfg = cfg.train_config()

    def on_eval(m, it):
        r = evaluate_scenes(m, test).values
        m.train()
        return {k: r[k] for k in VIEW_METRICS}

    def on_checkpoint(m, it):
        save_checkpoint(os.path.join(out, f"ckpt_{it + 1:06d}.ckpt"), m, cfg)

    with run_lock(out):
        with open(os.path.join(out, "metrics.log"), "w") as log:
            log.write(f"# omniseg train config_hash={cfg.hash()} mode={cfg['mode']} fusion={cfg.fusion} "
                      f"disable_3d_fusion={str(cfg['disable_3d_fusion']).lower()} "
                      f"late_fusion_only={str(cfg['late_fusion_only']).lower()}\n")
            log.write("# it total class bce dice [metric=value ...]\n")
            try:
                train_loop(model, tcfg, train, log=log, on_eval=on_eval if test else None, on_checkpoint=on_checkpoint)
            except ContractViolation as e:
                raise DataError(str(e)) from e
        save_checkpoint(os.path.join(out, "model.ckpt"), model, cfg)
    print(f"trained {tcfg.iterations} iterations; checkpoint {os.path.join(out, 'model.ckpt')}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def cmd_eval(args):
    import torch

    from .checkpoint import load_checkpoint
    from .inference import evaluate_scenes, oracle_predictor

    if args.domain == "mesh" and args.views is not None:
        raise UserError("--views applies to the pixel domain only")
    if args.views is not None and args.views < 1:
        raise UserError("--views must be >= 1")
    torch.set_num_threads(threads())
    scenes = load_split(args.data, args.split)
    if args.checkpoint == "oracle":
        model, predictor = None, oracle_predictor
    else:
        expected = _load_config(args.config, {}) if args.config else None
        try:
            model, _ = load_checkpoint(args.checkpoint, expected)
        except CheckpointError as e:
            raise DataError(str(e)) from e
        predictor = None
        names = _class_names(scenes)
        if tuple(model.config.class_names) != names:
            raise DataError(f"checkpoint classes {model.config.class_names} do not match the data vocabulary {names}")
    n_views = min(s.num_views for s in scenes)
    if args.views is not None and args.views > n_views:
        raise DataError(f"--views {args.views} exceeds the {n_views} views available")
    if args.domain == "mesh":
        if any(s.gt_surface_cloud is None or len(s.gt_surface_cloud) == 0 for s in scenes):
            raise DataError("mesh domain needs scenes with a surface cloud")
        if any(s.frames[0].depth is None for s in scenes):
            raise DataError("mesh domain needs depth")
    report = evaluate_scenes(model, scenes, args.domain, args.views, predictor)
    views = args.views if args.views is not None else n_views
    report.values = {"views": float(views), **report.values}
    out = args.out or (os.path.dirname(args.checkpoint) if args.checkpoint != "oracle" else args.data) or "."
    os.makedirs(out, exist_ok=True)
    stem = os.path.join(out, f"eval_{args.domain}_views{views}")
    with open(stem + ".txt", "w") as f:
        f.write(f"# domain={args.domain} views={views} checkpoint={args.checkpoint} scenes={len(scenes)}\n")
        f.write(report.to_text())
    with open(stem + ".csv", "w") as f:
        f.write(report.to_csv())
    _append_view_row(os.path.join(out, f"eval_{args.domain}_views.csv"), views, report.values)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _append_view_row(path, views, values):
    """Fixed-column table so runs at different --views plot as one curve."""
    fields = ["views", *VIEW_METRICS]
    rows = []
    if os.path.exists(path):
        with open(path) as f:
            rows = [r for r in csv.DictReader(f) if int(float(r["views"])) != views]
    rows.append({"views": str(views), **{k: f"{values.get(k, float('nan')):.6f}" for k in VIEW_METRICS}})
    rows.sort(key=lambda r: int(float(r["views"])))
    with open(path, "w") as f:
        w = csv.DictWriter(f, fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args):
    from .learn.gradcheck import GRADCHECK_MODEL, GRADCHECK_SCENE, format_results, gradcheck
    from .model import OmniSegModel

    model_cfg, scene_cfg = GRADCHECK_MODEL, GRADCHECK_SCENE
    if args.config:
        cfg = _load_config(args.config, {})
        model_cfg = cfg.model_config(GRADCHECK_MODEL.class_names[: cfg["n_classes"] + 1])
        scene_cfg = cfg.scene_config()
        n = sum(p.numel() for p in OmniSegModel(model_cfg).parameters())
        if n > 5000:
            raise UserError(f"gradcheck model has {n} parameters; keep it at or below 5000")
    corrupt = {}
    for item in args.corrupt or []:
        name, _, factor = item.partition("=")
        try:
            corrupt[name] = float(factor)
        except ValueError:
            raise UserError(f"--corrupt expects BLOCK=FACTOR, got {item!r}") from None
    results = gradcheck(model_cfg, scene_cfg, seed=args.seed, tol=args.tol, corrupt=corrupt)
    unknown = set(corrupt) - {r.name for r in results}
    if unknown:
        raise UserError(f"unknown parameter blocks: {sorted(unknown)}")
    print(format_results(results))
    worst = max(r.error for r in results)
    bad = [r.name for r in results if not r.passed]
    print(f"blocks {len(results)} max_rel_error {worst:.3e} tol {args.tol:g}")
    if bad:
        raise VerificationFailure("gradient check failed for: " + ", ".join(bad))
    print("PASS")
    return EXIT_OK


# ---------------------------------------------------------------- plot


def read_metrics(path):
    """Train ``metrics.log`` or an eval views table -> (x name, columns dict, ordered field names)."""
    try:
        lines = open(path).read().splitlines()
    except OSError as e:
        raise UserError(f"cannot read {path}: {e.strerror}") from e
    body = [(n, l) for n, l in enumerate(lines, 1) if l.strip() and not l.lstrip().startswith("#")]
    if not body:
        raise DataError(f"{path}: no metric rows")
    if "," in body[0][1]:
        header = [h.strip() for h in body[0][1].split(",")]
        cols = {h: [] for h in header}
        for n, line in body[1:]:
            cells = line.split(",")
            if len(cells) != len(header):
                raise DataError(f"{path}:{n}: expected {len(header)} fields, got {len(cells)}")
            for h, c in zip(header, cells):
                cols[h].append(_num(c, path, n))
        if not body[1:]:
            raise DataError(f"{path}: header without rows")
        return header[0], cols, header
    fields = ["it", "total", "class", "bce", "dice"]
    cols = {f: [] for f in fields}
    for n, line in body:
        tok = line.split()
        if len(tok) < 5:
            raise DataError(f"{path}:{n}: expected 'it total class bce dice [k=v ...]'")
        for f, t in zip(fields, tok[:5]):
            cols[f].append(_num(t, path, n))
        for t in tok[5:]:
            k, eq, v = t.partition("=")
            if not eq:
                raise DataError(f"{path}:{n}: bad field {t!r}")
            if k not in cols:
                fields.append(k)
                cols[k] = [float("nan")] * (len(cols["it"]) - 1)
            cols[k].append(_num(v, path, n))
        for k in fields:
            if len(cols[k]) < len(cols["it"]):
                cols[k].append(float("nan"))
    return "it", cols, fields


def _num(text, path, line):
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}:{line}: not a number: {text!r}") from None


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def render_svg(xname, cols, fields, title, width=640, height=400):
    m = dict(left=60, right=150, top=30, bottom=45)
    series = [f for f in fields if f != xname and any(math.isfinite(v) for v in cols[f])]
    xs = np.asarray(cols[xname], dtype=float)
    ys = [np.asarray(cols[f], dtype=float) for f in series]
    finite = np.concatenate([y[np.isfinite(y)] for y in ys]) if ys else np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(finite.min()), float(finite.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = width - m["left"] - m["right"], height - m["top"] - m["bottom"]

    def sx(x):
        return m["left"] + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return m["top"] + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2 - m["right"] / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
           f'<line x1="{m["left"]}" y1="{m["top"] + ph}" x2="{m["left"] + pw}" y2="{m["top"] + ph}" stroke="black"/>',
           f'<line x1="{m["left"]}" y1="{m["top"]}" x2="{m["left"]}" y2="{m["top"] + ph}" stroke="black"/>']
    for t in np.linspace(0, 1, 5):
        xv, yv = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
        out.append(f'<text x="{sx(xv):.1f}" y="{m["top"] + ph + 16}" text-anchor="middle" font-family="sans-serif" font-size="10">{xv:.4g}</text>')
        out.append(f'<text x="{m["left"] - 6}" y="{sy(yv) + 3:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{yv:.4g}</text>')
    out.append(f'<text x="{m["left"] + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-family="sans-serif" font-size="12">{xname}</text>')
    out.append(f'<text x="14" y="{m["top"] + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
               f'transform="rotate(-90 14 {m["top"] + ph / 2:.1f})">value</text>')
    for i, (name, y) in enumerate(zip(series, ys)):
        color = PALETTE[i % len(PALETTE)]
        ok = np.isfinite(y)
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(xs[ok], y[ok]))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"><title>{name}</title></polyline>')
        ly = m["top"] + 14 * i + 8
        out.append(f'<line x1="{width - m["right"] + 12}" y1="{ly}" x2="{width - m["right"] + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{width - m["right"] + 36}" y="{ly + 4}" font-family="sans-serif" font-size="11">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(args):
    xname, cols, fields = read_metrics(args.metrics)
    ext = os.path.splitext(args.out)[1].lower()
    if ext not in (".svg", ".csv"):
        raise UserError("--out must end in .svg or .csv")
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    if ext == ".csv":
        with open(args.out, "w") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(fields)
            for i in range(len(cols[xname])):
                w.writerow([f"{cols[k][i]:.6g}" for k in fields])
    else:
        with open(args.out, "w") as f:
            f.write(render_svg(xname, cols, fields, os.path.basename(args.metrics)))
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser():
    p = _Parser(prog="omniseg", description="Multiview RGB-D / single-image instance segmentation at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write synthetic RGB-D scenes")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--views", type=int, default=4)
    s.add_argument("--size", default="64x64", help="HxW")
    s.add_argument("--classes", type=int, default=4, help="object classes (1..6)")
    s.add_argument("--hole-rate", type=float, default=0.0, help="fraction of boundary pixels with missing depth")
    s.add_argument("--test-fraction", type=float, default=0.25)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--mode", choices=("2d", "3d", "joint"))
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--disable-3d-fusion", action="store_true")
    t.add_argument("--late-fusion-only", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint (or 'oracle') on the test split")
    e.add_argument("--checkpoint", required=True, help="checkpoint file, or 'oracle'")
    e.add_argument("--data", required=True)
    e.add_argument("--domain", choices=("pixels", "mesh"), default="pixels")
    e.add_argument("--views", type=int)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--config", help="fail unless the checkpoint was trained with this config")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check on a tiny model")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--corrupt", action="append", help=argparse.SUPPRESS)  # test hook: BLOCK=FACTOR
    g.set_defaults(func=cmd_gradcheck)

    pl = sub.add_parser("plot", help="SVG or CSV from a metrics file")
    pl.add_argument("--metrics", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as e:  # --help
        return e.code if isinstance(e.code, int) else EXIT_OK
    except (UserError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except (DataError, SceneLoadError, CheckpointError, GenerationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except VerificationFailure as e:
        print(f"FAIL: {e}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
